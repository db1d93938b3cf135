"""Run configuration: a flat ``key = value`` file with section headers.

Defaults reproduce the CIFAR recipe (m=3, T=3, alpha=80, beta=0.999,
lambda=1.0, lr 0.1 with Nesterov momentum 0.9, weight decay 5e-4, batch 128,
300 epochs with decay at 150/225). Desk presets override the scale.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

__all__ = ["RunConfig", "ConfigError", "SCHEMA", "load_config", "parse_value", "preset_path",
           "list_presets", "OUT_DIR_ENV"]

OUT_DIR_ENV = "PCL_OUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the ``section.key`` at fault."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    text = str(text).strip()
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _opt_int(text: str) -> int | None:
    text = str(text).strip()
    return None if text.lower() in ("", "none") else int(text)


@dataclass
class RunConfig:
    # [data]
    dataset: str = "cifar10"
    data_path: str = ""
    subset: int | None = None
    test_subset: int | None = None
    n_per_class: int = 500
    test_per_class: int = 500
    noise: float = 0.2
    turns: float = 1.0
    data_seed: int = 0
    jitter: float = 0.0
    augment: bool = True
    # [model]
    backbone: str = "cnn-small"
    split_index: int | None = None
    width: int | None = None
    # [pcl]
    m: int = 3
    temperature: float = 3.0
    alpha: float = 80.0
    lam: float = 1.0
    beta: float = 0.999
    use_pe: bool = True
    use_pm: bool = True
    pe_teacher_grad: bool = False
    deploy_peer: int = 1
    # [optim]
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    wd_on_norm: bool = True
    milestones: tuple[int, ...] = (150, 225)
    lr_gamma: float = 0.1
    batch_size: int = 128
    epochs: int = 300
    # [run]
    seed: int = 0
    out_dir: str = "runs/pcl"
    deterministic: bool = True
    eval_train: bool = True
    eval_batch: int = 1000
    save_checkpoints: bool = True

    def validate(self) -> "RunConfig":
        checks: list[tuple[str, bool, str]] = [
            ("data.kind", self.dataset in ("spiral", "cifar10"), "must be 'spiral' or 'cifar10'"),
            ("data.n_per_class", self.n_per_class >= 1, "must be >= 1"),
            ("data.test_per_class", self.test_per_class >= 1, "must be >= 1"),
            ("data.noise", self.noise >= 0, "must be >= 0"),
            ("data.jitter", self.jitter >= 0, "must be >= 0"),
            ("model.backbone", self.backbone in ("mlp-small", "cnn-small"), "must be 'mlp-small' or 'cnn-small'"),
            ("model.width", self.width is None or self.width >= 1, "must be >= 1"),
            ("pcl.m", self.m >= 1, "must be >= 1"),
            ("pcl.temperature", self.temperature > 0, "must be > 0"),
            ("pcl.alpha", self.alpha > 0, "must be > 0"),
            ("pcl.lambda", self.lam >= 0, "must be >= 0"),
            ("pcl.beta", 0 <= self.beta < 1, "must lie in [0, 1)"),
            ("pcl.deploy_peer", 1 <= self.deploy_peer <= self.m, f"must lie in [1, m={self.m}]"),
            ("optim.lr", self.lr > 0, "must be > 0"),
            ("optim.momentum", 0 <= self.momentum < 1, "must lie in [0, 1)"),
            ("optim.weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("optim.batch_size", self.batch_size >= 1, "must be >= 1"),
            ("optim.epochs", self.epochs >= 1, "must be >= 1"),
            ("optim.milestones", list(self.milestones) == sorted(self.milestones), "must be increasing"),
            ("run.eval_batch", self.eval_batch >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(name, message)
        if self.dataset == "cifar10":
            if not self.data_path:
                raise ConfigError("data.path", "required for dataset 'cifar10'")
            if not Path(self.data_path).is_dir():
                raise ConfigError("data.path", f"directory {self.data_path!r} does not exist")
        if self.dataset == "spiral" and self.backbone != "mlp-small":
            raise ConfigError("model.backbone", "spiral data needs the 'mlp-small' backbone")
        if self.dataset == "cifar10" and self.backbone != "cnn-small":
            raise ConfigError("model.backbone", "cifar10 needs the 'cnn-small' backbone")
        return self

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def sections(self) -> dict[str, dict[str, Any]]:
        out: dict[str, dict[str, Any]] = {}
        for (section, key), (attr, _, _) in SCHEMA.items():
            out.setdefault(section, {})[key] = getattr(self, attr)
        return out

    def to_text(self) -> str:
        lines = []
        for section, items in self.sections().items():
            lines.append(f"[{section}]")
            for key, value in items.items():
                lines.append(f"{key} = {format_value(value)}")
            lines.append("")
        return "\n".join(lines)


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


# (section, key) -> (RunConfig attribute, parser, help text)
SCHEMA: dict[tuple[str, str], tuple[str, Callable[[str], Any], str]] = {
    ("data", "kind"): ("dataset", str, "dataset kind: spiral | cifar10"),
    ("data", "path"): ("data_path", str, "directory holding the CIFAR-10 binary batches"),
    ("data", "subset"): ("subset", _opt_int, "keep the first k training images per class"),
    ("data", "test_subset"): ("test_subset", _opt_int, "keep the first k test images per class"),
    ("data", "n_per_class"): ("n_per_class", int, "spiral training points per class"),
    ("data", "test_per_class"): ("test_per_class", int, "spiral test points per class"),
    ("data", "noise"): ("noise", float, "spiral angular noise"),
    ("data", "turns"): ("turns", float, "spiral winding (turns over the unit radius)"),
    ("data", "seed"): ("data_seed", int, "seed of the synthetic data generator"),
    ("data", "jitter"): ("jitter", float, "Gaussian jitter scale for feature-vector augmentation"),
    ("data", "augment"): ("augment", _bool, "random augmentation of training views"),
    ("model", "backbone"): ("backbone", str, "backbone preset: mlp-small | cnn-small"),
    ("model", "split_index"): ("split_index", _opt_int, "layer index where branches separate"),
    ("model", "width"): ("width", _opt_int, "feature dimension d of the backbone (none = 64)"),
    ("pcl", "m"): ("m", int, "number of peers (branches)"),
    ("pcl", "temperature"): ("temperature", float, "distillation temperature T"),
    ("pcl", "alpha"): ("alpha", float, "ramp-up epoch threshold"),
    ("pcl", "lambda"): ("lam", float, "distillation weight after ramp-up"),
    ("pcl", "beta"): ("beta", float, "upper bound of the mean-teacher smoothing coefficient"),
    ("pcl", "use_pe"): ("use_pe", _bool, "include the peer ensemble distillation term"),
    ("pcl", "use_pm"): ("use_pm", _bool, "include the peer mean-teacher distillation term"),
    ("pcl", "pe_teacher_grad"): ("pe_teacher_grad", _bool, "let ensemble-distillation gradients reach the teacher"),
    ("pcl", "deploy_peer"): ("deploy_peer", int, "1-based peer exported as the target model"),
    ("optim", "lr"): ("lr", float, "initial learning rate"),
    ("optim", "momentum"): ("momentum", float, "momentum coefficient"),
    ("optim", "nesterov"): ("nesterov", _bool, "Nesterov momentum"),
    ("optim", "weight_decay"): ("weight_decay", float, "L2 weight decay"),
    ("optim", "wd_on_norm"): ("wd_on_norm", _bool, "apply weight decay to normalization parameters"),
    ("optim", "milestones"): ("milestones", _int_list, "epochs at which the lr is multiplied by lr_gamma"),
    ("optim", "lr_gamma"): ("lr_gamma", float, "lr decay factor at each milestone"),
    ("optim", "batch_size"): ("batch_size", int, "mini-batch size"),
    ("optim", "epochs"): ("epochs", int, "training epochs"),
    ("run", "seed"): ("seed", int, "seed for initialisation, shuffling and augmentation"),
    ("run", "out_dir"): ("out_dir", str, f"output directory (overridden by ${OUT_DIR_ENV})"),
    ("run", "deterministic"): ("deterministic", _bool, "single-threaded BLAS and no wall-clock in logs"),
    ("run", "eval_train"): ("eval_train", _bool, "also evaluate on the training split each epoch"),
    ("run", "eval_batch"): ("eval_batch", int, "evaluation chunk size"),
    ("run", "save_checkpoints"): ("save_checkpoints", _bool, "write checkpoints and deployment files"),
}


def parse_value(section: str, key: str, text: str) -> tuple[str, Any]:
    name = f"{section}.{key}"
    if (section, key) not in SCHEMA:
        raise ConfigError(name, "unknown key")
    attr, parser, _ = SCHEMA[(section, key)]
    try:
        return attr, parser(text)
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {text!r}: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                validate: bool = True) -> RunConfig:
    """Read a config file (optional), apply ``section.key`` overrides and the env override."""
    values: dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError("file", f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in {s for s, _ in SCHEMA}:
                raise ConfigError(section, "unknown section")
            for key, text in parser.items(section):
                attr, value = parse_value(section, key, text)
                values[attr] = value
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        attr, value = parse_value(section, key, text)
        values[attr] = value
    if os.environ.get(OUT_DIR_ENV):
        values["out_dir"] = os.environ[OUT_DIR_ENV]
    cfg = RunConfig(**values)
    return cfg.validate() if validate else cfg


def list_presets() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("pclkd.presets").iterdir() if p.name.endswith(".cfg"))


def preset_path(name: str) -> Path:
    path = Path(str(resources.files("pclkd.presets") / f"{name}.cfg"))
    if not path.is_file():
        raise ConfigError("preset", f"unknown preset {name!r}; available: {list_presets()}")
    return path
