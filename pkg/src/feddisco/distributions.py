"""Category distributions and local-vs-target discrepancy metrics."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

_SUM_TOL = 1e-9


class Metric(str, enum.Enum):
    """Discrepancy metric between a local and a target category distribution."""

    L1 = "l1"
    L2 = "l2"
    COSINE = "cosine"
    KL = "kl"

    @classmethod
    def parse(cls, value: "str | Metric") -> "Metric":
        if isinstance(value, Metric):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown discrepancy metric {value!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class CategoryDistribution:
    """Per-category probability vector, optionally with the counts it came from."""

    probs: np.ndarray
    counts: np.ndarray | None = None

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probs must be finite and non-negative")
        if abs(probs.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"probs must sum to 1 (got {probs.sum()!r})")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        if self.counts is not None:
            counts = np.asarray(self.counts, dtype=np.int64)
            if counts.shape != probs.shape:
                raise ValueError("counts and probs must have the same length")
            counts.setflags(write=False)
            object.__setattr__(self, "counts", counts)

    @property
    def num_categories(self) -> int:
        return int(self.probs.size)


def from_counts(counts, num_categories: int) -> CategoryDistribution:
    """Build a distribution from per-category sample counts.

    Raises:
        ValueError: on a length mismatch, negative counts, or an all-zero
            ("empty dataset") count vector.
    """
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size != num_categories:
        raise ValueError(f"expected {num_categories} counts, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    counts = counts.astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ValueError("empty dataset")
    return CategoryDistribution(counts / total, counts)


def uniform_target(num_categories: int) -> CategoryDistribution:
    if num_categories < 1:
        raise ValueError("need at least one category")
    return CategoryDistribution(np.full(num_categories, 1.0 / num_categories))


def _as_probs(dist) -> np.ndarray:
    if isinstance(dist, CategoryDistribution):
        return dist.probs
    return np.asarray(dist, dtype=np.float64)


def discrepancy(local, target, metric: Metric | str = Metric.KL) -> float:
    """Distance ``d_k`` between a local distribution and the target.

    All four metrics are oriented so that smaller means closer: cosine is
    returned as ``1 - cos``, and KL is ``KL(local || target)`` with
    ``0 * ln(0 / x) = 0``.
    """
    metric = Metric.parse(metric)
    p = _as_probs(local)
    q = _as_probs(target)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")

    if metric is Metric.L1:
        return float(np.abs(p - q).sum())
    if metric is Metric.L2:
        return float(np.sqrt(np.square(p - q).sum()))
    if metric is Metric.COSINE:
        if np.array_equal(p, q):
            return 0.0
        denom = np.linalg.norm(p) * np.linalg.norm(q)
        if denom == 0.0:
            raise ValueError("cosine discrepancy undefined for a zero vector")
        # clipped: rounding can push cos a hair above 1
        return float(max(0.0, 1.0 - float(p @ q) / denom))

    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("unsupported target zero")
    ps = p[support]
    return float(max(0.0, np.sum(ps * np.log(ps / q[support]))))


def client_discrepancies(dists, target, metric: Metric | str = Metric.KL) -> np.ndarray:
    """Vector of discrepancies, one per client distribution."""
    return np.array([discrepancy(d, target, metric) for d in dists], dtype=np.float64)
