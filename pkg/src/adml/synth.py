"""Labeled vector datasets: the two-class Gaussian mixture benchmark and binary I/O.

Values are drawn in float64, clipped to the unit box, then snapped to the
float32 grid so that the on-disk format (float32) round-trips bit-exactly
while in-memory arithmetic stays 64-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, require_finite

__all__ = [
    "LabeledPoint",
    "Dataset",
    "GaussianMixtureConfig",
    "generate_mixture",
    "save_dataset",
    "load_dataset",
    "DATASET_MAGIC",
]

DATASET_MAGIC = b"ADMLDS\x01"


@dataclass(frozen=True)
class LabeledPoint:
    """One input vector with its integer class label."""

    x: np.ndarray
    label: int


@dataclass
class Dataset:
    """Dense labeled vectors: x is (n, k) float64, y is (n,) int64.

    Labels are dense integers starting at 0; n_classes = max label + 1.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(require_finite(self.x, "dataset"), dtype=np.float64)
        self.y = np.ascontiguousarray(np.asarray(self.y), dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("dataset needs (n, k) inputs and n labels")
        if self.x.shape[0] == 0:
            raise ValueError("dataset is empty")
        if np.min(self.y) < 0:
            raise ValueError("labels must be nonnegative")

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(np.max(self.y)) + 1

    def __len__(self) -> int:
        return self.x.shape[0]

    def point(self, i: int) -> LabeledPoint:
        return LabeledPoint(self.x[i], int(self.y[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self.point(i)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx].copy(), self.y[idx].copy())

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.y == label)


@dataclass(frozen=True)
class GaussianMixtureConfig:
    """Two isotropic Gaussians in [0,1]^k, one per class."""

    input_dim: int = 3072
    mu_a: float = 0.25
    mu_b: float = 0.75
    sigma: float = 0.025
    n_train: int = 508
    n_test: int = 516
    clip_to_unit_box: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")


# Sub-stream tags for dataset generation, mixed on top of cfg.seed.
_SPLIT_TRAIN = 101
_SPLIT_TEST = 102


def _draw_class(gen: np.random.Generator, n: int, k: int, mu: float, sigma: float, clip: bool):
    vals = gen.standard_normal((n, k)) * sigma + mu
    if clip:
        np.clip(vals, 0.0, 1.0, out=vals)
    # Snap to the float32 grid so save/load round-trips are bit-exact.
    return vals.astype(np.float32).astype(np.float64)


def sample_class_points(cfg: GaussianMixtureConfig, label: int, n: int, rng: SeededRng) -> np.ndarray:
    """Draw n points of one mixture class through the standard pipeline."""
    mu = cfg.mu_a if label == 0 else cfg.mu_b
    return _draw_class(rng.generator(), n, cfg.input_dim, mu, cfg.sigma, cfg.clip_to_unit_box)


def _make_split(cfg: GaussianMixtureConfig, n: int, split_tag: int) -> Dataset:
    n_a = (n + 1) // 2  # class a takes the extra point when n is odd
    n_b = n - n_a
    rng = SeededRng(cfg.seed)
    xa = sample_class_points(cfg, 0, n_a, rng.derive(split_tag, 0))
    xb = sample_class_points(cfg, 1, n_b, rng.derive(split_tag, 1))
    x = np.concatenate([xa, xb], axis=0)
    y = np.concatenate([np.zeros(n_a, dtype=np.int64), np.ones(n_b, dtype=np.int64)])
    return Dataset(x, y)


def generate_mixture(cfg: GaussianMixtureConfig):
    """(train, test) datasets with balanced classes and disjoint draws."""
    if cfg.n_train < 2 or cfg.n_test < 2:
        raise ValueError("n_train and n_test must both be >= 2")
    train = _make_split(cfg, cfg.n_train, _SPLIT_TRAIN)
    test = _make_split(cfg, cfg.n_test, _SPLIT_TEST)
    return train, test


def save_dataset(dataset: Dataset, path) -> None:
    """Write the binary dataset format (see load_dataset for layout)."""
    n, k = dataset.x.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", n, k, dataset.n_classes))
        labels = dataset.y.astype("<u4")
        rows = dataset.x.astype("<f4")
        for i in range(n):
            fh.write(labels[i].tobytes())
            fh.write(rows[i].tobytes())


def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"unexpected end of dataset file at offset {offset + len(data)} ({what})")
    return data


def load_dataset(path) -> Dataset:
    """Read a dataset file.

    Layout: magic "ADMLDS\\x01", u32 n, u32 k, u32 n_classes (little-endian),
    then n records of (u32 label, k float32 little-endian).
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise ValueError("bad magic at offset 0")
        off = len(DATASET_MAGIC)
        header = _read_exact(fh, 12, off, "header")
        n, k, n_classes = struct.unpack("<III", header)
        off += 12
        if n == 0:
            raise ValueError("dataset file contains no points")
        if k == 0:
            raise ValueError("dataset file has zero input dimension")
        record = 4 + 4 * k
        body = _read_exact(fh, record * n, off, "records")
        extra = fh.read(1)
    if extra:
        raise ValueError(f"trailing bytes after offset {off + record * n}")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(n, record)
    labels = raw[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    x = raw[:, 4:].copy().view("<f4").reshape(n, k).astype(np.float64)
    if np.any(labels >= n_classes):
        raise ValueError("label outside declared class inventory")
    return Dataset(x, labels)
