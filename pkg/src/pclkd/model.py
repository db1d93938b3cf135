"""Multi-branch network, feature-ensemble teacher and the peer mean-teacher bank."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .nn import BackboneSpec, Linear, Module, ParamStore, backbone_preset, build_layers
from .tensor import DimensionError, Tensor, concat, no_grad

__all__ = [
    "Architecture",
    "Head",
    "MultiBranchModel",
    "MeanTeacherBank",
    "build_model",
    "smoothing_coefficient",
    "global_step",
    "forward_peers",
    "forward_ensemble_teacher",
    "forward_mean_teachers",
]


@dataclass(frozen=True)
class Architecture:
    """Everything needed to rebuild a model from a checkpoint."""

    backbone: str
    in_shape: tuple[int, ...]
    num_classes: int
    num_branches: int = 3
    split_index: int | None = None
    ensemble: bool | None = None
    width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(s) for s in self.in_shape))
        if self.num_branches < 1:
            raise ValueError("num_branches must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        # an ensemble of one branch is not a teacher; m=1 is the plain network
        if self.ensemble is None:
            object.__setattr__(self, "ensemble", self.num_branches > 1)

    def spec(self) -> BackboneSpec:
        spec = backbone_preset(self.backbone, self.in_shape, self.width)
        return spec if self.split_index is None else spec.with_split(self.split_index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_shape"] = list(self.in_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


class Head(Module):
    """Separated high-level layers of one peer plus its classifier."""

    def __init__(self, spec: BackboneSpec, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.body = self.add_module("body", build_layers(spec.layers[spec.split_index:], rng))
        self.classifier = self.add_module("classifier", Linear(spec.feature_dim, num_classes, rng=rng))

    def forward_features(self, h: Tensor) -> tuple[Tensor, Tensor]:
        feat = self.body(h)
        if feat.ndim != 2:
            feat = feat.reshape(feat.shape[0], -1)
        return feat, self.classifier(feat)


class MultiBranchModel(Module):
    """Shared trunk, ``m`` independently initialised heads, optional ensemble classifier."""

    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.arch = arch
        spec = arch.spec()
        self.feature_dim = spec.feature_dim
        self.trunk = self.add_module("trunk", build_layers(spec.layers[:spec.split_index], rng))
        heads = Module()
        for j in range(arch.num_branches):
            heads.add_module(str(j), Head(spec, arch.num_classes, rng))
        self._heads = self.add_module("heads", heads)
        self.ensemble_classifier: Linear | None = None
        if arch.ensemble:
            self.ensemble_classifier = self.add_module(
                "ensemble", Linear(arch.num_branches * spec.feature_dim, arch.num_classes, rng=rng))

    @property
    def num_branches(self) -> int:
        return self.arch.num_branches

    @property
    def heads(self) -> list[Head]:
        return list(self._heads._children.values())

    def component_param_counts(self) -> "OrderedDict[str, int]":
        counts = OrderedDict(trunk=self.trunk.param_store().num_params())
        for j, head in enumerate(self.heads):
            counts[f"head{j + 1}"] = head.param_store().num_params()
        if self.ensemble_classifier is not None:
            counts["ensemble_classifier"] = self.ensemble_classifier.param_store().num_params()
        return counts

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return self.param_store().arrays()

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        store = self.param_store()
        own = store.arrays()
        if strict:
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            if missing or extra:
                raise KeyError(f"checkpoint does not match model: missing={missing[:5]} unexpected={extra[:5]}")
        for name, target in own.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != target.shape:
                raise DimensionError(f"{name}: checkpoint shape {src.shape} != model shape {target.shape}")
            target[...] = src


def build_model(arch: Architecture, seed: int | np.random.Generator = 0) -> MultiBranchModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return MultiBranchModel(arch, rng)


def global_step(epoch: int, batch_num: int, batch_ind: int) -> int:
    """``g = e * Batch_num + Batch_ind`` with a 1-based ``batch_ind``."""
    if batch_ind < 1:
        raise ValueError("batch_ind is 1-based")
    return epoch * batch_num + batch_ind


def smoothing_coefficient(g: int, beta: float = 0.999) -> float:
    if g < 1:
        raise ValueError(f"global step must be >= 1, got {g}")
    return min(1.0 - 1.0 / g, beta)


def forward_peers(model: MultiBranchModel, views: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """Route view ``j`` through the trunk and head ``j``."""
    if len(views) != model.num_branches:
        raise ValueError(f"expected {model.num_branches} views, got {len(views)}")
    shapes = {tuple(np.shape(v.data if isinstance(v, Tensor) else v)) for v in views}
    if len(shapes) != 1:
        raise DimensionError(f"views must share one shape, got {sorted(shapes)}")
    feats, logits = [], []
    for view, head in zip(views, model.heads):
        view = view if isinstance(view, Tensor) else Tensor(view)
        f, z = head.forward_features(model.trunk(view))
        feats.append(f)
        logits.append(z)
    return feats, logits


def forward_ensemble_teacher(model: MultiBranchModel, features: Sequence[Tensor]) -> Tensor:
    """Concatenate peer features in peer order and classify them."""
    if model.ensemble_classifier is None:
        raise ValueError("model has no ensemble classifier (single-branch configuration)")
    if len(features) != model.num_branches:
        raise ValueError(f"expected {model.num_branches} feature tensors, got {len(features)}")
    for j, f in enumerate(features):
        if f.ndim != 2 or f.shape[1] != model.feature_dim:
            raise DimensionError(f"peer {j + 1} features have shape {f.shape}, expected width {model.feature_dim}")
    return model.ensemble_classifier(concat(features, axis=1))


class MeanTeacherBank:
    """Temporal-mean copies of trunk, every head and the ensemble classifier.

    The bank owns a structurally identical :class:`MultiBranchModel` whose
    arrays are only ever written by :meth:`update`.
    """

    def __init__(self, student: MultiBranchModel, beta: float = 0.999, init: str = "copy"):
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        self.beta = beta
        self.step = 0
        self.model = MultiBranchModel(student.arch, np.random.default_rng(0))
        for p in self.model.parameters():
            p.requires_grad = False
        self.model.eval()
        self._teacher = self.model.param_store().arrays()
        if init == "copy":
            for name, arr in student.state_arrays().items():
                self._teacher[name][...] = arr
            self.populated = True
        elif init == "zeros":
            for arr in self._teacher.values():
                arr[...] = 0.0
            self.populated = False
        else:
            raise ValueError(f"init must be 'copy' or 'zeros', got {init!r}")

    def phi(self, g: int) -> float:
        return smoothing_coefficient(g, self.beta)

    def update(self, student: MultiBranchModel, g: int | None = None, phi: float | None = None) -> float:
        """Blend the student into the bank; returns the coefficient used.

        ``g`` defaults to ``step + 1``. ``phi`` overrides the schedule.
        """
        g = self.step + 1 if g is None else int(g)
        if g < 1:
            raise ValueError(f"global step must be >= 1, got {g}")
        if g <= self.step:
            raise ValueError(f"global step must increase: got {g} after {self.step}")
        coef = self.phi(g) if phi is None else float(phi)
        source = student.state_arrays()
        with no_grad():
            for name, t in self._teacher.items():
                s = source[name]
                t *= coef
                t += (1.0 - coef) * s
        self.step = g
        self.populated = True
        return coef

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self._teacher.items())

    def load_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.model.load_arrays(arrays)
        self.step = int(step)
        self.populated = True

    def target_arrays(self, peer: int = 0) -> "OrderedDict[str, np.ndarray]":
        """Trunk plus one head, renamed as a single-branch model."""
        out = OrderedDict()
        for name, arr in self._teacher.items():
            if name.startswith("trunk."):
                out[name] = arr.copy()
            elif name.startswith(f"heads.{peer}."):
                out["heads.0." + name[len(f"heads.{peer}."):]] = arr.copy()
        return out


def forward_mean_teachers(bank: MeanTeacherBank, views: Sequence[Tensor]) -> list[Tensor]:
    """Mean teacher ``j`` sees view ``j``; eval mode, nothing recorded."""
    if not bank.populated:
        raise RuntimeError("mean-teacher bank has not been populated (no update yet)")
    with no_grad():
        _, logits = forward_peers(bank.model, views)
    return logits
