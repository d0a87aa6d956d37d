"""Shared primitives: sample matrices, privacy budget types, moment contracts,
deterministic RNG streams, and the small order-statistics helpers everything
else is built on."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Dataset",
    "PureDP",
    "ZCDP",
    "ApproxDP",
    "PrivacyBudget",
    "MomentSpec",
    "RngStream",
    "ScheduleWarning",
    "median",
    "clip",
    "split_batches",
]


class ScheduleWarning(UserWarning):
    """A requested parameter was adjusted (floored, capped, or replaced by a
    fallback) to keep a schedule well defined at the given problem size."""


@dataclass(frozen=True)
class Dataset:
    """Immutable n x d matrix of real samples, one row per sample.

    A 1-d input is treated as n scalar samples (d = 1). Entries must be
    finite; the backing array is copied and marked read-only.
    """

    samples: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.samples, dtype=float, copy=True, order="C")
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ValueError(f"samples must be 1-d or 2-d, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def rows(self, start: int, stop: int) -> "Dataset":
        """Contiguous row slice [start, stop) as a new Dataset."""
        if not (0 <= start < stop <= self.n):
            raise ValueError(f"bad row range [{start}, {stop}) for n={self.n}")
        return Dataset(self.samples[start:stop])


@dataclass(frozen=True)
class PureDP:
    """(eps, 0)-differential privacy."""

    eps: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eps) and self.eps > 0):
            raise ValueError(f"eps must be positive and finite, got {self.eps}")


@dataclass(frozen=True)
class ZCDP:
    """rho zero-concentrated differential privacy."""

    rho: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise ValueError(f"rho must be positive and finite, got {self.rho}")


@dataclass(frozen=True)
class ApproxDP:
    """(eps, delta)-differential privacy with delta in (0, 1)."""

    eps: float
    delta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eps) and self.eps > 0):
            raise ValueError(f"eps must be positive and finite, got {self.eps}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


PrivacyBudget = Union[PureDP, ZCDP, ApproxDP]


@dataclass(frozen=True)
class MomentSpec:
    """Per-coordinate centered moment contract: E|X_j - mu_j|^k <= gamma."""

    k: float
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.k) and self.k >= 2):
            raise ValueError(f"k must be >= 2, got {self.k}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")


def _label_key(label: object) -> int:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class RngStream:
    """Deterministic, forkable randomness source.

    A stream is identified by (master_seed, path). Children forked with
    distinct label paths are statistically independent, and the generator for
    a given identity is bit-reproducible across runs and across worker
    layouts, which is what makes parallel sweeps replay identically.
    """

    master_seed: int
    path: tuple = ()

    def __post_init__(self) -> None:
        if not isinstance(self.master_seed, int) or isinstance(self.master_seed, bool):
            raise ValueError("master_seed must be an integer")
        if not (0 <= self.master_seed < 2**64):
            raise ValueError("master_seed must fit in 64 bits")
        object.__setattr__(self, "path", tuple(self.path))

    def child(self, *labels: object) -> "RngStream":
        if not labels:
            raise ValueError("child() needs at least one label")
        return RngStream(self.master_seed, self.path + tuple(labels))

    def _seed_sequence(self) -> np.random.SeedSequence:
        key = tuple(_label_key(lbl) for lbl in self.path)
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=key)

    def generator(self) -> np.random.Generator:
        """Fresh generator at this stream's fixed starting state."""
        return np.random.Generator(np.random.PCG64(self._seed_sequence()))

    def derived_seed(self) -> int:
        """Stable 64-bit fingerprint of this stream, for result rows."""
        return int(self._seed_sequence().generate_state(1, np.uint64)[0])


def median(values) -> float:
    """Median of a non-empty vector; even length takes the midpoint of the
    two central order statistics (this choice caps the median's sensitivity
    to one changed element)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"median expects a vector, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValueError("median of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("median requires finite entries")
    return float(np.median(arr))


def clip(x, lo: float, hi: float):
    """Coordinate-wise clamp to [lo, hi]; scalar in, scalar out."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("clip bounds must be finite")
    if lo > hi:
        raise ValueError(f"clip bounds inverted: lo={lo} > hi={hi}")
    if np.isscalar(x):
        return float(min(hi, max(lo, float(x))))
    return np.clip(np.asarray(x, dtype=float), lo, hi)


def batch_bounds(n: int, m: int) -> list[tuple[int, int]]:
    """Row ranges for m contiguous batches: the first m-1 have floor(n/m)
    rows, the last absorbs the remainder."""
    if not (1 <= m <= n):
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    b = n // m
    bounds = [(i * b, (i + 1) * b) for i in range(m - 1)]
    bounds.append(((m - 1) * b, n))
    return bounds


def split_batches(dataset: Dataset, m: int) -> list[Dataset]:
    """Split into m contiguous batches; ordered, disjoint, covering all rows."""
    return [dataset.rows(a, b) for a, b in batch_bounds(dataset.n, m)]
