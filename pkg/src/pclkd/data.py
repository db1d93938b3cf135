"""Datasets, m-fold stochastic augmentation and seeded batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "Dataset",
    "TrainBatch",
    "augment",
    "augment_batch",
    "make_views",
    "make_synthetic",
    "load_cifar10",
    "normalize_pair",
    "epoch_order",
    "iterate_batches",
    "num_batches",
    "CIFAR_RECORD_BYTES",
]

CIFAR_RECORD_BYTES = 3073
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) < 1 or len(self.x) != len(self.y):
            raise ValueError(f"dataset needs n >= 1 matching samples/labels, got {len(self.x)}/{len(self.y)}")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    @property
    def in_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, index) -> "Dataset":
        return replace(self, x=self.x[index], y=self.y[index])

    def to_csv(self, path: str | Path) -> None:
        """Write feature data as ``x0..x{f-1},label`` rows."""
        if self.x.ndim != 2:
            raise ValueError("CSV dump is only defined for feature-matrix datasets")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.x.shape[1])] + ["label"])
            for row, label in zip(self.x, self.y):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass
class TrainBatch:
    views: list[np.ndarray]
    labels: np.ndarray


# -- augmentation -------------------------------------------------------------

def augment(image: np.ndarray, rng: np.random.Generator | None, pad: int = 4,
            flip: bool | None = None, offset: tuple[int, int] | None = None) -> np.ndarray:
    """Pad-and-crop plus horizontal flip for a ``c x h x w`` image.

    ``rng=None`` is eval mode (identity). ``flip``/``offset`` pin the random
    decisions, which makes the transform testable.
    """
    if rng is None and flip is None and offset is None:
        return image
    c, h, w = image.shape
    if offset is None:
        offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    i, j = offset
    out = padded[:, i:i + h, j:j + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(x: np.ndarray, rng: np.random.Generator, jitter: float = 0.0, pad: int = 4) -> np.ndarray:
    """One augmentation draw per sample.

    Images get crop+flip. Feature vectors get additive Gaussian jitter of
    scale ``jitter`` (the vector analogue; ``0`` disables it).
    """
    if x.ndim == 4:
        n, c, h, w = x.shape
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        flips = rng.random(n) < 0.5
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(x)
        for k in range(n):
            i, j = offs[k]
            crop = padded[k, :, i:i + h, j:j + w]
            out[k] = crop[:, :, ::-1] if flips[k] else crop
        return out
    if jitter > 0:
        return x + jitter * rng.standard_normal(x.shape)
    return x.copy()


def make_views(x: np.ndarray, labels: np.ndarray, m: int, rng: np.random.Generator | None,
               jitter: float = 0.0) -> TrainBatch:
    """``m`` independent augmentation draws of the same samples."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if rng is None:
        views = [x.copy() for _ in range(m)]
    else:
        views = [augment_batch(x, rng, jitter=jitter) for _ in range(m)]
    return TrainBatch(views=views, labels=np.asarray(labels, dtype=np.int64))


# -- batching -----------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seed- and epoch-determined permutation of ``range(n)``."""
    return np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def iterate_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index arrays covering every sample once; the short final batch is kept."""
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- datasets -----------------------------------------------------------------

def normalize_pair(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Per-channel standardisation with statistics from the train split only."""
    axes = (0, 2, 3) if train.x.ndim == 4 else (0,)
    mean = train.x.mean(axis=axes)
    std = train.x.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1, 1, 1) if train.x.ndim == 4 else (1, -1)

    def apply(ds: Dataset) -> Dataset:
        return replace(ds, x=(ds.x - mean.reshape(shape)) / std.reshape(shape), mean=mean, std=std)

    return apply(train), apply(test)


def make_synthetic(seed: int, n_per_class: int, num_classes: int = 3, noise: float = 0.2,
                   turns: float = 1.0) -> Dataset:
    """``num_classes``-armed 2-D spiral; label = arm index.

    Radius ``r ~ U(0.05, 1)``; angle ``2*pi*(k/C + turns*r) + noise*N(0,1)``.
    With ``noise=0`` each arm is a curve ``theta(r)`` so classes separate in polar
    coordinates.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(num_classes):
        r = rng.uniform(0.05, 1.0, size=n_per_class)
        theta = 2 * np.pi * (k / num_classes + turns * r) + noise * rng.standard_normal(n_per_class)
        xs.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
        ys.append(np.full(n_per_class, k))
    return Dataset(np.concatenate(xs), np.concatenate(ys), num_classes)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    expected = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path}: missing CIFAR-10 batch file (expected {expected} bytes)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != expected:
        raise IOError(f"{path}: {raw.size} bytes, expected {expected} "
                      f"({CIFAR_RECORDS_PER_FILE} records of {CIFAR_RECORD_BYTES})")
    rec = raw.reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _first_k_per_class(y: np.ndarray, k: int, num_classes: int) -> np.ndarray:
    picks = [np.flatnonzero(y == c)[:k] for c in range(num_classes)]
    return np.sort(np.concatenate(picks))


def load_cifar10(directory: str | Path, subset: int | None = None,
                 test_subset: int | None = None) -> tuple[Dataset, Dataset]:
    """Read the binary CIFAR-10 release (unnormalised, pixels scaled to [0, 1]).

    ``subset`` keeps the first ``k`` training samples of each class,
    ``test_subset`` does the same for the test split.
    """
    directory = Path(directory)
    parts = [_read_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10)
    test = Dataset(*_read_cifar_file(directory / CIFAR_TEST_FILE), 10)
    if subset is not None:
        train = train.subset(_first_k_per_class(train.y, subset, 10))
    if test_subset is not None:
        test = test.subset(_first_k_per_class(test.y, test_subset, 10))
    return train, test
