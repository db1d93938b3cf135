"""``pclkd`` command line: train, eval, export, inspect.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import SCHEMA, ConfigError, RunConfig, format_value, load_config, list_presets, preset_path, OUT_DIR_ENV
from .model import MeanTeacherBank
from .train import evaluate, export_deployment, load_datasets, load_deployment, train

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

_DEFAULTS = RunConfig()


def _add_config_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="config file (INI-style sections)")
    src.add_argument("--preset", help=f"bundled config: {', '.join(list_presets())}")
    p.add_argument("--seed", type=int, help="shorthand for --run.seed")
    group = p.add_argument_group("config overrides (take precedence over the file)")
    for (section, key), (attr, _, text) in SCHEMA.items():
        group.add_argument(f"--{section}.{key}", dest=f"ov:{section}.{key}", metavar="V",
                           help=f"{text} (default: {format_value(getattr(_DEFAULTS, attr))})")


def _config_from(args: argparse.Namespace) -> RunConfig:
    overrides = {name[3:]: value for name, value in vars(args).items()
                 if name.startswith("ov:") and value is not None}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    path = preset_path(args.preset) if args.preset else args.config
    if path is not None and not Path(path).is_file():
        raise ConfigError("config", f"file {str(path)!r} not found")
    return load_config(path, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pclkd",
        description="Peer-collaborative online distillation on a numpy autodiff engine.",
        epilog=f"Exit codes: 0 ok, 1 runtime error, 2 config error. ${OUT_DIR_ENV} overrides run.out_dir.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a multi-branch model and write logs, checkpoints, summary")
    _add_config_args(p)

    p = sub.add_parser("eval", help="top-1 error of a checkpoint on the configured test split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--mode", default="target", help="target | ensemble | peer_<j> (default: target)")
    p.add_argument("--split", choices=("test", "train"), default="test", help="dataset split (default: test)")
    p.add_argument("--json", action="store_true", help="print a JSON object instead of text")
    _add_config_args(p)

    p = sub.add_parser("export", help="write target.ckpt and ensemble.ckpt from a training checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path, required=True, help="destination directory")
    p.add_argument("--deploy-peer", type=int, default=1, help="1-based peer kept as the target (default: 1)")

    p = sub.add_parser("inspect", help="print architecture and per-component parameter counts")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--json", action="store_true", help="print a JSON object instead of text")
    return parser


def cmd_train(args) -> int:
    cfg = _config_from(args)
    result = train(cfg)
    final = result.summary["final"]
    print(f"wrote {result.out_dir}")
    print(f"final test error: target {final['test_err_target']:.2f}%  ensemble {final['test_err_ensemble']:.2f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    model, meta = load_deployment(args.checkpoint)
    train_ds, test_ds = load_datasets(cfg)
    ds = test_ds if args.split == "test" else train_ds
    if tuple(model.arch.in_shape) != ds.in_shape or model.arch.num_classes != ds.num_classes:
        raise ValueError(f"checkpoint expects input {tuple(model.arch.in_shape)} with {model.arch.num_classes} "
                         f"classes, dataset has input {ds.in_shape} with {ds.num_classes}")
    # single-branch checkpoints ignore deploy_peer
    err = evaluate(model, ds, args.mode, deploy_peer=cfg.deploy_peer, eval_batch=cfg.eval_batch)
    if args.json:
        print(json.dumps({"checkpoint": str(args.checkpoint), "mode": args.mode, "split": args.split,
                          "n": len(ds), "top1_error": err}))
    else:
        print(f"{args.mode} top-1 error on {args.split} ({len(ds)} samples): {err:.2f}%")
    return EXIT_OK


def cmd_export(args) -> int:
    model, meta = load_deployment(args.checkpoint)
    if meta.get("kind") != "train":
        raise ValueError(f"{args.checkpoint}: export needs a training checkpoint, got kind {meta.get('kind')!r}")
    if not 1 <= args.deploy_peer <= model.num_branches:
        raise ValueError(f"--deploy-peer {args.deploy_peer} outside [1, {model.num_branches}]")
    bank = MeanTeacherBank(model, init="copy")
    extra = {k: meta[k] for k in ("seed", "epoch", "global_step") if k in meta}
    for kind, path in export_deployment(bank, args.out, args.deploy_peer, extra).items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, meta = load_deployment(args.checkpoint)
    counts = dict(model.component_param_counts())
    info = {"kind": meta.get("kind"), "arch": model.arch.to_dict(), "param_counts": counts,
            "total_params": sum(counts.values()), "inference_params": counts["trunk"] + counts["head1"]}
    if args.json:
        print(json.dumps(info))
        return EXIT_OK
    arch = model.arch
    print(f"kind: {info['kind']}")
    print(f"backbone: {arch.backbone}  input {tuple(arch.in_shape)}  classes {arch.num_classes}  "
          f"branches {arch.num_branches}")
    for name, n in counts.items():
        print(f"  {name:<22s}{n:>10d}")
    print(f"  {'total':<22s}{info['total_params']:>10d}")
    print(f"  {'single-target path':<22s}{info['inference_params']:>10d}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
