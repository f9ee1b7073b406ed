"""Synthetic labelled 2-D densities."""

import csv
from dataclasses import dataclass

import numpy as np

from .rng import Xoshiro256pp

KINDS = ("gaussians8", "checkerboard", "moons", "spirals")
CLASS_COUNTS = {"gaussians8": 8, "checkerboard": 2, "moons": 2, "spirals": 2}
GAUSSIANS_RADIUS = 4.0


@dataclass
class DatasetSpec:
    kind: str = "gaussians8"
    size: int = 10000
    seed: int = 0
    noise: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.size <= 0:
            raise ValueError("dataset size must be positive")
        if self.noise < 0:
            raise ValueError("noise scale must be >= 0")

    @property
    def class_count(self):
        return CLASS_COUNTS[self.kind]


def _gaussians8(n, rng, sigma):
    labels = rng.integers(8, n)
    angle = 2.0 * np.pi * labels / 8.0
    centers = GAUSSIANS_RADIUS * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + sigma * rng.normal((n, 2)), labels


def _checkerboard(n, rng):
    # 32 populated unit squares of an 8x8 board on [-4, 4]^2: (col + row) even.
    col = rng.integers(8, n)
    row = 2 * rng.integers(4, n) + (col % 2)
    offset = rng.random((n, 2))
    x = np.stack([col + offset[:, 0], row + offset[:, 1]], axis=1) - 4.0
    return x, (col % 2).astype(np.int64)


def _moons(n, rng, sigma):
    labels = rng.integers(2, n)
    angle = np.pi * rng.random(n)
    upper = np.stack([np.cos(angle), np.sin(angle)], axis=1)
    lower = np.stack([1.0 - np.cos(angle), 0.5 - np.sin(angle)], axis=1)
    x = np.where(labels[:, None] == 0, upper, lower)
    x = (x - np.array([0.5, 0.25])) * 2.5
    return x + sigma * rng.normal((n, 2)), labels


def _spirals(n, rng, sigma):
    labels = rng.integers(2, n)
    r = np.sqrt(rng.random(n)) * 3.0 * np.pi
    angle = r + np.pi * labels
    x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1) * (4.0 / (3.0 * np.pi))
    return x + sigma * rng.normal((n, 2)), labels


def sample(spec, count=None, rng=None):
    """Draw ``count`` labelled points; returns ``(X, labels)`` clipped to [-8, 8]^2."""
    count = spec.size if count is None else count
    if rng is None:
        rng = Xoshiro256pp.substream(spec.seed, f"data/{spec.kind}")
    if spec.kind == "gaussians8":
        x, y = _gaussians8(count, rng, spec.noise)
    elif spec.kind == "checkerboard":
        x, y = _checkerboard(count, rng)
    elif spec.kind == "moons":
        x, y = _moons(count, rng, spec.noise)
    else:
        x, y = _spirals(count, rng, spec.noise)
    return np.clip(x, -8.0, 8.0), np.asarray(y, dtype=np.int64)


def few_shot_subset(X, labels, m, seed):
    """Seeded choice of ``m`` points without replacement, in draw order."""
    if m > len(X):
        raise ValueError(f"subset of {m} requested from {len(X)} points")
    idx = Xoshiro256pp.substream(seed, "data/few-shot").choice_without_replacement(len(X), m)
    return X[idx], labels[idx]


def write_csv(path, X, labels):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x0", "x1", "label"])
        for (a, b), c in zip(X, labels):
            w.writerow([repr(float(a)), repr(float(b)), int(c)])
