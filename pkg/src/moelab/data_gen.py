"""Synthetic regression data: X ~ Uniform(box), Y = regression(X) + N(0, noise_variance).

Random streams are counter-based (Philox) and keyed by seeds derived with SHA-256 from a
master seed plus string/integer tags, so every replicate owns an independent stream and
results do not depend on evaluation order.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model_core import MixingMeasure

MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, *tags) -> int:
    """64-bit seed derived from a master seed and a sequence of tags."""
    h = hashlib.sha256(str(int(master_seed) & MASK64).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little")


def philox_stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """n standard normal draws from uniform pairs."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


@dataclass(frozen=True)
class InputDistribution:
    """Uniform distribution on the box [lo, hi]^d."""

    d: int
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"input box needs lo < hi, got [{self.lo}, {self.hi}]")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("input box must be bounded")
        if self.d < 1:
            raise ValueError("input dimension must be positive")


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    responses: np.ndarray
    noise_variance: float
    seed: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.responses.shape[0]:
            raise ValueError("inputs and responses disagree in length")

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"x_{u}" for u in range(self.d)] + ["y"])
            for x, y in zip(self.inputs, self.responses):
                writer.writerow([repr(float(v)) for v in x] + [repr(float(y))])

    @classmethod
    def from_csv(cls, path, noise_variance: float = float("nan"), seed: int = 0) -> "Dataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1], noise_variance, seed)


def sample_inputs(dist: InputDistribution, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one sample")
    rng = philox_stream(derive_seed(seed, "inputs"))
    return dist.lo + (dist.hi - dist.lo) * rng.random((n, dist.d))


def generate_dataset(truth: MixingMeasure, dist: InputDistribution, n: int,
                     noise_variance: float = 0.01, seed: int = 0) -> Dataset:
    if noise_variance < 0:
        raise ValueError("noise variance must be nonnegative")
    if dist.d != truth.d:
        raise ValueError(f"input dimension {dist.d} does not match model dimension {truth.d}")
    X = sample_inputs(dist, n, seed)
    y = truth.evaluate(X)
    if noise_variance > 0:
        eps = box_muller(philox_stream(derive_seed(seed, "noise")), n)
        y = y + np.sqrt(noise_variance) * eps
    return Dataset(X, y, float(noise_variance), int(seed))
