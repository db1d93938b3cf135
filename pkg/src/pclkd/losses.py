"""Supervised and distillation terms of the peer-collaborative objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, clamp_min, log_softmax, pick

__all__ = [
    "HyperParams",
    "LossBundle",
    "NonFiniteLossError",
    "cross_entropy",
    "peer_ce_loss",
    "teacher_ce_loss",
    "soften",
    "ramp_up",
    "kl_to_target",
    "kl_divergence",
    "peer_ensemble_distill",
    "peer_mean_distill",
    "total_loss",
]

LOG_Q_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class HyperParams:
    temperature: float = 3.0
    alpha: float = 80.0
    lam: float = 1.0
    beta: float = 0.999
    m: int = 3
    epochs: int = 300

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.m < 1:
            raise ValueError("m must be >= 1")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"loss term {term} is non-finite ({value}){where}")
        self.term, self.value, self.step = term, value, step


@dataclass
class LossBundle:
    ce_p: Tensor
    ce_t: Tensor
    pe: Tensor
    pm: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"loss_ce_p": self.ce_p.item(), "loss_ce_t": self.ce_t.item(),
                "loss_pe": self.pe.item(), "loss_pm": self.pm.item(), "loss_total": self.total.item()}


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy against integer labels."""
    labels = _check_labels(labels, logits.shape[1])
    return -pick(log_softmax(logits, axis=1), labels).mean()


def peer_ce_loss(peer_logits: Sequence[Tensor], labels) -> Tensor:
    """Cross-entropy summed over peers (each term batch-mean)."""
    loss = cross_entropy(peer_logits[0], labels)
    for z in peer_logits[1:]:
        loss = loss + cross_entropy(z, labels)
    return loss


def teacher_ce_loss(z_t: Tensor, labels) -> Tensor:
    return cross_entropy(z_t, labels)


def soften(z, temperature: float) -> np.ndarray:
    """Temperature softmax as a plain array (no graph)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ramp_up(epoch: float, alpha: float = 80.0, lam: float = 1.0) -> float:
    if epoch <= alpha:
        return lam * math.exp(-5.0 * (1.0 - epoch / alpha) ** 2)
    return lam


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def kl_to_target(target: np.ndarray | Tensor, student_logits: Tensor, temperature: float) -> Tensor:
    """Batch-mean ``KL(target || softmax(student_logits / T))``.

    A plain array ``target`` is a constant distribution. A :class:`Tensor`
    target is treated as teacher *logits* and stays differentiable.
    """
    log_q = clamp_min(log_softmax(student_logits.scale(1.0 / temperature), axis=1), LOG_Q_FLOOR)
    n = student_logits.shape[0]
    if isinstance(target, Tensor):
        log_p = log_softmax(target.scale(1.0 / temperature), axis=1)
        p = log_p.exp()
        return (p * (log_p - log_q)).sum().scale(1.0 / n)
    p = np.asarray(target, dtype=np.float64)
    if p.shape != student_logits.shape:
        raise ValueError(f"target shape {p.shape} != student logits shape {student_logits.shape}")
    entropy_part = float(_xlogx(p).sum())
    return (as_tensor(entropy_part) - (as_tensor(p) * log_q).sum()).scale(1.0 / n)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``sum p log(p/q)`` with ``0 log 0 = 0`` and ``q`` floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), 1e-12)
    return (_xlogx(p) - np.where(p > 0, p * np.log(q), 0.0)).sum(axis=-1)


def peer_ensemble_distill(z_t: Tensor | None, peer_logits: Sequence[Tensor], temperature: float,
                          omega: float, teacher_grad: bool = False,
                          target_probs: np.ndarray | None = None) -> Tensor:
    """``omega * T^2 * sum_j KL(p_t || p_j)``; the teacher is a constant unless ``teacher_grad``.

    ``target_probs`` supplies ``p_t`` directly and bypasses ``z_t``.
    """
    if target_probs is not None:
        target = target_probs
    else:
        target = z_t if teacher_grad else soften(z_t, temperature)
    loss = kl_to_target(target, peer_logits[0], temperature)
    for z in peer_logits[1:]:
        loss = loss + kl_to_target(target, z, temperature)
    return loss.scale(omega * temperature ** 2)


def peer_mean_distill(mt_logits: Sequence, peer_logits: Sequence[Tensor], temperature: float,
                      omega: float) -> Tensor:
    """``omega * T^2/(m-1) * sum_j sum_{l != j} KL(p^mt_l || p_j)``; zero for one peer."""
    m = len(peer_logits)
    if len(mt_logits) != m:
        raise ValueError(f"{len(mt_logits)} mean-teacher outputs for {m} peers")
    if m < 2:
        return Tensor(0.0)
    targets = [soften(z, temperature) for z in mt_logits]
    loss = None
    for j, z in enumerate(peer_logits):
        for l in range(m):
            if l == j:
                continue
            term = kl_to_target(targets[l], z, temperature)
            loss = term if loss is None else loss + term
    return loss.scale(omega * temperature ** 2 / (m - 1))


def total_loss(ce_p: Tensor, ce_t: Tensor, pe: Tensor, pm: Tensor, step: int | None = None) -> Tensor:
    for name, term in (("L_ce_p", ce_p), ("L_ce_t", ce_t), ("L_pe", pe), ("L_pm", pm)):
        value = term.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value, step)
    return ce_p + ce_t + pe + pm
