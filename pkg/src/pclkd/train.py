"""End-to-end peer-collaborative training, evaluation and artifact writing."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, iterate_batches, load_cifar10, make_synthetic, make_views, normalize_pair, num_batches
from .losses import (LossBundle, peer_ce_loss, peer_ensemble_distill, peer_mean_distill,
                     ramp_up, soften, teacher_ce_loss, total_loss)
from .model import (Architecture, MeanTeacherBank, MultiBranchModel, build_model, forward_ensemble_teacher,
                    forward_mean_teachers, forward_peers, global_step)
from .nn import SGD
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "TrainResult",
    "load_datasets",
    "compute_losses",
    "predict",
    "top1_error",
    "evaluate",
    "branch_variance",
    "metric_columns",
    "train",
    "load_deployment",
    "export_deployment",
]

LOSS_KEYS = ("loss_ce_p", "loss_ce_t", "loss_pe", "loss_pm", "loss_total")


@dataclass
class TrainResult:
    records: list[dict]
    steps: list[dict]
    summary: dict
    model: MultiBranchModel
    bank: MeanTeacherBank
    out_dir: Path | None = None
    artifacts: dict = field(default_factory=dict)


# -- data -----------------------------------------------------------------------

def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "spiral":
        train = make_synthetic(cfg.data_seed, cfg.n_per_class, 3, cfg.noise, cfg.turns)
        test = make_synthetic(cfg.data_seed + 1_000_003, cfg.test_per_class, 3, cfg.noise, cfg.turns)
    else:
        train, test = load_cifar10(cfg.data_path, cfg.subset, cfg.test_subset)
    return normalize_pair(train, test)


# -- losses -----------------------------------------------------------------------

def compute_losses(model: MultiBranchModel, bank: MeanTeacherBank | None, views: Sequence, labels,
                   temperature: float, omega: float, use_pe: bool = True, use_pm: bool = True,
                   pe_teacher_grad: bool = False, pe_target: np.ndarray | None = None,
                   step: int | None = None) -> tuple[LossBundle, dict]:
    """Forward every branch, the ensemble teacher and the mean teachers; assemble the objective.

    ``pe_target`` replaces the ensemble teacher's soft targets (used to hold
    them fixed in gradient checks). The returned dict exposes the logits.
    """
    views = [v if isinstance(v, Tensor) else Tensor(v) for v in views]
    feats, logits = forward_peers(model, views)
    zero = Tensor(0.0)
    ce_p = peer_ce_loss(logits, labels)
    z_t = None
    if model.ensemble_classifier is not None:
        z_t = forward_ensemble_teacher(model, feats)
        ce_t = teacher_ce_loss(z_t, labels)
    else:
        ce_t = zero
    mt_logits = forward_mean_teachers(bank, views) if bank is not None else None

    if z_t is not None and use_pe and omega > 0:
        pe = peer_ensemble_distill(z_t, logits, temperature, omega, teacher_grad=pe_teacher_grad,
                                   target_probs=pe_target)
    else:
        pe = zero
    if mt_logits is not None and use_pm and omega > 0 and model.num_branches > 1:
        pm = peer_mean_distill(mt_logits, logits, temperature, omega)
    else:
        pm = zero
    total = total_loss(ce_p, ce_t, pe, pm, step=step)
    return LossBundle(ce_p, ce_t, pe, pm, total), {"peer": logits, "teacher": z_t, "mean_teacher": mt_logits}


# -- evaluation -------------------------------------------------------------------

def _as_model(model_or_bank) -> MultiBranchModel:
    return model_or_bank.model if isinstance(model_or_bank, MeanTeacherBank) else model_or_bank


def predict(model_or_bank, x: np.ndarray, eval_batch: int = 1000) -> dict:
    """Eval-mode logits of every head and (if present) the ensemble classifier.

    All heads see the same un-augmented input, so the trunk runs once per chunk.
    """
    model = _as_model(model_or_bank)
    was_training = model.training
    model.eval()
    peers: list[list[np.ndarray]] = [[] for _ in range(model.num_branches)]
    ens: list[np.ndarray] = []
    try:
        with no_grad():
            for start in range(0, len(x), eval_batch):
                h = model.trunk(Tensor(x[start:start + eval_batch]))
                feats = []
                for j, head in enumerate(model.heads):
                    f, z = head.forward_features(h)
                    feats.append(f)
                    peers[j].append(z.data)
                if model.ensemble_classifier is not None:
                    ens.append(forward_ensemble_teacher(model, feats).data)
    finally:
        model.train(was_training)
    return {
        "peers": [np.concatenate(p) for p in peers],
        "ensemble": np.concatenate(ens) if ens else None,
    }


def top1_error(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax (lowest index on ties) misses the label."""
    pred = np.argmax(logits, axis=1)
    return 100.0 * float(np.mean(pred != np.asarray(labels)))


def evaluate(model_or_bank, dataset: Dataset, mode: str = "target", deploy_peer: int = 1,
             eval_batch: int = 1000) -> float:
    """Top-1 error (%) in ``target``, ``ensemble`` or ``peer_<j>`` (1-based) mode."""
    model = _as_model(model_or_bank)
    if mode == "target":
        idx = 0 if model.num_branches == 1 else deploy_peer - 1
    elif mode == "ensemble":
        if model.ensemble_classifier is None:
            raise ValueError("ensemble mode needs a model with an ensemble classifier")
        idx = None
    elif mode.startswith("peer_"):
        idx = int(mode[5:]) - 1
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if idx is not None and not 0 <= idx < model.num_branches:
        raise ValueError(f"mode {mode!r} asks for peer {idx + 1} but the model has {model.num_branches}")
    out = predict(model, dataset.x, eval_batch)
    logits = out["ensemble"] if idx is None else out["peers"][idx]
    return top1_error(logits, dataset.y)


def branch_variance(peer_probs: Sequence[np.ndarray]) -> float:
    """Mean over peer pairs of the batch-mean Euclidean distance between predictions."""
    m = len(peer_probs)
    if m < 2:
        raise ValueError("branch variance needs at least two peers")
    dists = [float(np.mean(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1)))
             for a, b in combinations(peer_probs, 2)]
    return float(np.mean(dists))


def metric_columns(m: int) -> list[str]:
    """CSV column order of the per-epoch metrics log."""
    cols = ["epoch", "global_step", "lr", "omega", *LOSS_KEYS, "branch_variance",
            "test_err_target", "test_err_ensemble", "train_err_target", "train_err_ensemble"]
    cols += [f"test_err_peer{j}" for j in range(1, m + 1)]
    cols += [f"test_err_mt{j}" for j in range(1, m + 1)]
    cols += [f"train_err_peer{j}" for j in range(1, m + 1)]
    cols += [f"train_err_mt{j}" for j in range(1, m + 1)]
    cols += ["wall_seconds"]
    return cols


def _split_errors(prefix: str, student: dict, teacher: dict, labels: np.ndarray, deploy: int) -> dict:
    rec = {}
    for j, z in enumerate(student["peers"], 1):
        rec[f"{prefix}_err_peer{j}"] = top1_error(z, labels)
    for j, z in enumerate(teacher["peers"], 1):
        rec[f"{prefix}_err_mt{j}"] = top1_error(z, labels)
    rec[f"{prefix}_err_target"] = rec[f"{prefix}_err_mt{deploy}"]
    ens = teacher["ensemble"]
    rec[f"{prefix}_err_ensemble"] = top1_error(ens, labels) if ens is not None else math.nan
    return rec


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- checkpoints ------------------------------------------------------------------

def _train_state(model: MultiBranchModel, bank: MeanTeacherBank, opt: SGD) -> "OrderedDict[str, np.ndarray]":
    arrays = OrderedDict()
    for name, arr in model.state_arrays().items():
        arrays[f"student/{name}"] = arr
    for name, arr in bank.arrays().items():
        arrays[f"teacher/{name}"] = arr
    for name, arr in opt.velocity.items():
        arrays[f"velocity/{name}"] = arr
    return arrays


def export_deployment(bank: MeanTeacherBank, out_dir: Path, deploy_peer: int = 1, extra_meta: dict | None = None) -> dict:
    """Write ``target.ckpt`` (trunk + one head) and ``ensemble.ckpt`` (everything)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arch = bank.model.arch
    meta = dict(extra_meta or {})
    target_arch = Architecture(arch.backbone, arch.in_shape, arch.num_classes, 1, arch.split_index, False, arch.width)
    paths = {"target": save_checkpoint(out_dir / "target.ckpt", bank.target_arrays(deploy_peer - 1),
                                       {**meta, "kind": "target", "arch": target_arch.to_dict(),
                                        "deploy_peer": deploy_peer})}
    if arch.ensemble:
        paths["ensemble"] = save_checkpoint(out_dir / "ensemble.ckpt", bank.arrays(),
                                            {**meta, "kind": "ensemble", "arch": arch.to_dict()})
    return paths


def load_deployment(path: str | Path) -> tuple[MultiBranchModel, dict]:
    """Rebuild an eval-ready model from a target, ensemble or training checkpoint.

    Training checkpoints yield their mean-teacher bank.
    """
    arrays, meta = load_checkpoint(path)
    kind = meta.get("kind")
    arch = Architecture.from_dict(meta["arch"])
    if kind == "train":
        arrays = OrderedDict((k[len("teacher/"):], v) for k, v in arrays.items() if k.startswith("teacher/"))
    elif kind not in ("target", "ensemble"):
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    model = MultiBranchModel(arch, np.random.default_rng(0))
    model.load_arrays(arrays)
    model.eval()
    return model, meta


# -- training -----------------------------------------------------------------------

@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def train(cfg: RunConfig, out_dir: str | Path | None = None, write: bool = True,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the full mini-batch loop and return logs plus the final model and bank.

    Per mini-batch: views -> peers -> ensemble teacher -> mean teachers ->
    losses -> backward -> SGD step -> mean-teacher update.
    """
    with _single_thread(cfg.deterministic):
        return _train(cfg, out_dir, write, on_epoch)


def _train(cfg: RunConfig, out_dir, write: bool, on_epoch) -> TrainResult:
    t0 = time.perf_counter()
    train_ds, test_ds = load_datasets(cfg)
    arch = Architecture(cfg.backbone, train_ds.in_shape, train_ds.num_classes, cfg.m, cfg.split_index,
                        width=cfg.width)
    init_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = build_model(arch, np.random.default_rng(init_seq))
    bank = MeanTeacherBank(model, cfg.beta)
    opt = SGD(model.param_store(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
              milestones=cfg.milestones, gamma=cfg.lr_gamma, nesterov=cfg.nesterov, wd_on_norm=cfg.wd_on_norm)
    aug_rng = np.random.default_rng(aug_seq) if cfg.augment else None

    out_path = Path(out_dir if out_dir is not None else cfg.out_dir) if write else None
    columns = metric_columns(cfg.m)
    csv_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.cfg").write_text(cfg.to_text())
        csv_fh = open(out_path / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(columns)

    n = len(train_ds)
    batch_num = num_batches(n, cfg.batch_size)
    meta = {"arch": arch.to_dict(), "seed": cfg.seed}
    records: list[dict] = []
    steps: list[dict] = []
    best = {"epoch": -1, "test_err_target": math.inf}
    artifacts: dict = {}
    g = 0
    try:
        for epoch in range(cfg.epochs):
            omega = ramp_up(epoch, cfg.alpha, cfg.lam)
            model.train()
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            for batch_ind, idx in enumerate(iterate_batches(n, cfg.batch_size, cfg.seed, epoch), 1):
                g_next = global_step(epoch, batch_num, batch_ind)
                batch = make_views(train_ds.x[idx], train_ds.y[idx], cfg.m, aug_rng, cfg.jitter)
                opt.zero_grad()
                bundle, _ = compute_losses(model, bank, batch.views, batch.labels, cfg.temperature, omega,
                                           cfg.use_pe, cfg.use_pm, cfg.pe_teacher_grad, step=g_next)
                bundle.total.backward()
                opt.step(epoch)
                bank.update(model, g_next)
                g = g_next
                vals = bundle.values()
                steps.append({"step": g, "epoch": epoch, "batch": batch_ind, **vals})
                for k in LOSS_KEYS:
                    sums[k] += vals[k]

            rec = {"epoch": epoch, "global_step": g, "lr": opt.lr(epoch), "omega": omega}
            rec.update({k: sums[k] / batch_num for k in LOSS_KEYS})
            student_test = predict(model, test_ds.x, cfg.eval_batch)
            teacher_test = predict(bank, test_ds.x, cfg.eval_batch)
            rec["branch_variance"] = (branch_variance([soften(z, 1.0) for z in student_test["peers"]])
                                      if cfg.m > 1 else math.nan)
            rec.update(_split_errors("test", student_test, teacher_test, test_ds.y, cfg.deploy_peer))
            if cfg.eval_train:
                rec.update(_split_errors("train", predict(model, train_ds.x, cfg.eval_batch),
                                         predict(bank, train_ds.x, cfg.eval_batch), train_ds.y, cfg.deploy_peer))
            rec["wall_seconds"] = 0.0 if cfg.deterministic else time.perf_counter() - t0
            row = {c: rec.get(c, math.nan) for c in columns}
            records.append(row)
            if csv_fh is not None:
                writer.writerow([_fmt(row[c]) for c in columns])
                csv_fh.flush()
            if row["test_err_target"] < best["test_err_target"]:
                best = {k: row[k] for k in columns if k.startswith(("test_err", "train_err"))}
                best["epoch"] = epoch
                if out_path is not None and cfg.save_checkpoints:
                    save_checkpoint(out_path / "best.ckpt", _train_state(model, bank, opt),
                                    {**meta, "kind": "train", "epoch": epoch, "global_step": g})
                    artifacts.update(export_deployment(bank, out_path, cfg.deploy_peer,
                                                       {**meta, "epoch": epoch, "global_step": g}))
            if on_epoch is not None:
                on_epoch(row)
            logger.info("epoch %d lr %.4g omega %.4f loss %.4f target err %.2f ensemble err %.2f",
                        epoch, rec["lr"], omega, rec["loss_total"], rec["test_err_target"],
                        rec["test_err_ensemble"])
    finally:
        if csv_fh is not None:
            csv_fh.close()

    final = {k: records[-1][k] for k in columns if k.startswith(("test_err", "train_err"))}
    summary = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "global_step": g,
        "batches_per_epoch": batch_num,
        "best": best,
        "final": final,
        "param_counts": dict(model.component_param_counts()),
        # out_dir is left out so equal-seed runs in different places summarise identically
        "config": {sec: {k: v for k, v in items.items() if (sec, k) != ("run", "out_dir")}
                   for sec, items in cfg.sections().items()},
    }
    if not cfg.deterministic:
        summary["wall_seconds"] = time.perf_counter() - t0
    if out_path is not None:
        if cfg.save_checkpoints:
            save_checkpoint(out_path / "last.ckpt", _train_state(model, bank, opt),
                            {**meta, "kind": "train", "epoch": cfg.epochs - 1, "global_step": g})
        with open(out_path / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            keys = ["step", "epoch", "batch", *LOSS_KEYS]
            w.writerow(keys)
            for s in steps:
                w.writerow([_fmt(s[k]) for k in keys])
        (out_path / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    return TrainResult(records, steps, summary, model, bank, out_path, artifacts)


def _json_default(obj):
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
