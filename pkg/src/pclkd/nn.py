"""Layer primitives, parameter registry and the Nesterov SGD optimizer."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, batch_norm, conv2d, global_avg_pool, matmul, relu

__all__ = [
    "ParamStore",
    "Module",
    "Linear",
    "Conv2d",
    "BatchNorm",
    "ReLU",
    "GlobalAvgPool",
    "Sequential",
    "LayerSpec",
    "BackboneSpec",
    "PRESETS",
    "backbone_preset",
    "build_layers",
    "SGD",
    "lr_at",
]


@dataclass
class ParamStore:
    """Flat, insertion-ordered view of a module tree's state."""

    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    norm_params: set = field(default_factory=set)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.params.items())
        out.update(self.buffers)
        return out


class Module:
    """Minimal container: parameters, buffers and child modules by name."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def param_store(self, prefix: str = "") -> ParamStore:
        store = ParamStore()
        for name, p in self.named_parameters(prefix):
            if name in store.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            store.params[name] = p
        for name, b in self.named_buffers(prefix):
            store.buffers[name] = b
        for mod_prefix, mod in self._walk(prefix):
            if isinstance(mod, BatchNorm):
                store.norm_params.update(mod_prefix + n for n in mod._params)
        return store

    def _walk(self, prefix: str):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._walk(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        # stored as in x out so forward is a plain x @ W
        self.weight = self.add_param("weight", _kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = self.add_param("bias", np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"Linear({self.in_features}->{self.out_features}) got input of shape {x.shape}")
        return matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        fan_in = cin * kernel * kernel
        self.weight = self.add_param("weight", _kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class BatchNorm(Module):
    """Batch normalization for ``n x f`` or ``n x c x h x w`` inputs."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = self.add_param("weight", np.ones(num_features))
        self.bias = self.add_param("bias", np.zeros(num_features))
        self._buffers["running_mean"] = np.zeros(num_features)
        self._buffers["running_var"] = np.ones(num_features)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                          self._buffers["running_var"], self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)


class Sequential(Module):
    def __init__(self, layers: Sequence[Module] = ()):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_module(str(i), layer)

    def __len__(self) -> int:
        return len(self._children)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self._children.values():
            x = layer(x)
        return x


# -- backbones ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer descriptor: ``kind`` plus its integer arguments."""

    kind: str
    args: tuple[int, ...] = ()


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    split_index: int
    feature_dim: int

    def __post_init__(self):
        if not 0 < self.split_index < len(self.layers):
            raise ValueError(f"split_index must lie in (0, {len(self.layers)}), got {self.split_index}")

    def with_split(self, split_index: int) -> "BackboneSpec":
        return BackboneSpec(self.name, self.layers, split_index, self.feature_dim)


def _block(kind_in: int, width: int, conv: bool, stride: int = 1) -> list[LayerSpec]:
    if conv:
        return [LayerSpec("conv", (kind_in, width, 3, stride, 1)), LayerSpec("bn", (width,)), LayerSpec("relu")]
    return [LayerSpec("linear", (kind_in, width)), LayerSpec("bn", (width,)), LayerSpec("relu")]


def backbone_preset(name: str, in_shape: Sequence[int], width: int | None = None) -> BackboneSpec:
    """Desk-scale backbones; the final block is the separated high-level part.

    ``width`` is the feature dimension ``d`` (default 64): every hidden layer
    of ``mlp-small``, the last stage of ``cnn-small``.
    """
    d = 64 if width is None else int(width)
    if d < 1:
        raise ValueError(f"width must be >= 1, got {d}")
    if name == "mlp-small":
        (f,) = in_shape
        layers = _block(f, d, False) + _block(d, d, False) + _block(d, d, False)
        return BackboneSpec(name, tuple(layers), split_index=6, feature_dim=d)
    if name == "cnn-small":
        c = in_shape[0]
        layers = (_block(c, 16, True) + _block(16, 32, True, stride=2)
                  + _block(32, d, True, stride=2) + [LayerSpec("gap")])
        return BackboneSpec(name, tuple(layers), split_index=6, feature_dim=d)
    raise KeyError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")


PRESETS = ("mlp-small", "cnn-small")


def build_layers(specs: Sequence[LayerSpec], rng: np.random.Generator) -> Sequential:
    layers: list[Module] = []
    for spec in specs:
        if spec.kind == "linear":
            layers.append(Linear(*spec.args, rng=rng))
        elif spec.kind == "conv":
            cin, cout, k, s, p = spec.args
            layers.append(Conv2d(cin, cout, k, s, p, rng=rng))
        elif spec.kind == "bn":
            layers.append(BatchNorm(*spec.args))
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "gap":
            layers.append(GlobalAvgPool())
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return Sequential(layers)


# -- optimizer ----------------------------------------------------------------

def lr_at(epoch: int, base_lr: float, milestones: Sequence[int], gamma: float = 0.1) -> float:
    """Step schedule: ``base_lr * gamma**k`` with k milestones already reached."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


class SGD:
    """SGD with Nesterov momentum and L2 weight decay folded into the gradient.

    Per parameter: ``d = g + wd*w``, ``v <- mu*v - lr*d``, ``w <- w + mu*v - lr*d``.
    """

    def __init__(self, store: ParamStore, lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 5e-4, milestones: Sequence[int] = (150, 225),
                 gamma: float = 0.1, nesterov: bool = True, wd_on_norm: bool = True):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.store = store
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.milestones = tuple(milestones)
        self.gamma = gamma
        self.nesterov = nesterov
        self.wd_on_norm = wd_on_norm
        self.velocity: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.zeros_like(p.data)) for name, p in store.params.items()
        )

    def lr(self, epoch: int) -> float:
        return lr_at(epoch, self.base_lr, self.milestones, self.gamma)

    def zero_grad(self) -> None:
        for p in self.store.params.values():
            p.grad = None

    def step(self, epoch: int) -> None:
        lr = self.lr(epoch)
        mu = self.momentum
        for name, p in self.store.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; call backward() first")
            wd = self.weight_decay if (self.wd_on_norm or name not in self.store.norm_params) else 0.0
            d = p.grad + wd * p.data if wd else p.grad
            v = self.velocity[name]
            v *= mu
            v -= lr * d
            if self.nesterov:
                p.data += mu * v - lr * d
            else:
                p.data += v
