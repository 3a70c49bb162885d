"""Server-side aggregation weights and model averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import Metric
from .model import ModelParams

_SUM_TOL = 1e-9


class AllClientsZeroedError(ValueError):
    """Every client's Disco score was clipped to zero by the ReLU."""


@dataclass(frozen=True)
class AggregationWeights:
    p: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("weights must be finite and non-negative")
        if abs(p.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"weights must sum to 1 (got {p.sum()!r})")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    def __len__(self) -> int:
        return int(self.p.size)


@dataclass(frozen=True)
class DiscoParams:
    """Coefficients of ``ReLU(n_k - a * d_k + b)``."""

    a: float = 0.5
    b: float = 0.1
    metric: Metric = Metric.KL

    def __post_init__(self) -> None:
        if not np.isfinite(self.a) or not np.isfinite(self.b):
            raise ValueError("Disco a and b must be finite")
        if self.a < 0:
            raise ValueError("Disco a must be >= 0")
        object.__setattr__(self, "metric", Metric.parse(self.metric))


def _relative_sizes(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("sizes must be a non-empty vector")
    if np.any(n < 0):
        raise ValueError("sizes must be non-negative")
    if n.sum() == 0:
        raise ValueError("all client sizes are zero")
    return n


def relative_sizes(sizes) -> np.ndarray:
    """``n_k = |B_k| / sum_i |B_i|``."""
    n = _relative_sizes(sizes)
    return n / n.sum()


def dataset_size_weights(n) -> AggregationWeights:
    n = _relative_sizes(n)
    if abs(n.sum() - 1.0) > _SUM_TOL:
        raise ValueError("relative sizes must sum to 1")
    return AggregationWeights(n.copy())


def equal_weights(num_clients: int) -> AggregationWeights:
    if num_clients < 1:
        raise ValueError("need at least one client")
    return AggregationWeights(np.full(num_clients, 1.0 / num_clients))


def disco_scores(n, d, params: DiscoParams) -> np.ndarray:
    """Unnormalized ``ReLU(n_k - a * d_k + b)``."""
    n = np.asarray(n, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if n.shape != d.shape:
        raise ValueError(f"sizes and discrepancies differ in length: {n.shape} vs {d.shape}")
    if np.any(d < 0):
        raise ValueError("discrepancies must be non-negative")
    return np.maximum(n - params.a * d + params.b, 0.0)


def disco_weights(n, d, params: DiscoParams) -> AggregationWeights:
    """Discrepancy-aware weights ``p_k ∝ ReLU(n_k - a * d_k + b)``.

    With ``a = b = 0`` this returns ``n`` unchanged.

    Raises:
        AllClientsZeroedError: if every score is zero. Lower ``a`` or raise
            ``b``; ``a`` in 0.4-0.6 with ``b = 0.1`` is usually safe.
    """
    n = np.asarray(n, dtype=np.float64)
    if abs(n.sum() - 1.0) > _SUM_TOL:
        raise ValueError("relative sizes must sum to 1")
    if params.a == 0 and params.b == 0:
        # ReLU(n) / sum(n) is n; skip the division so the reduction is bit-exact
        return dataset_size_weights(n)
    scores = disco_scores(n, d, params)
    total = scores.sum()
    if total <= 0:
        raise AllClientsZeroedError(
            f"all clients zeroed by Disco re-weighting (a={params.a}, b={params.b}); reduce a or raise b"
        )
    return AggregationWeights(scores / total)


def fednova_disco_weights(n, d, tau, params: DiscoParams) -> AggregationWeights:
    """Disco weights ``q`` followed by FedNova's step normalization ``p_k ∝ q_k / tau_k``.

    Pair with :func:`fednova_step_scale` to recover FedNova's effective step.
    """
    tau = np.asarray(tau, dtype=np.float64)
    q = disco_weights(n, d, params).p
    if tau.shape != q.shape:
        raise ValueError("tau must have one entry per client")
    if np.any(tau < 1):
        raise ValueError("local step counts must be >= 1")
    if np.all(tau == tau[0]):
        return AggregationWeights(q.copy())
    scaled = q / tau
    return AggregationWeights(scaled / scaled.sum())


def fednova_step_scale(q, tau) -> float:
    """Server step multiplier ``(sum_k q_k tau_k) * (sum_k q_k / tau_k)``.

    The FedNova update ``tau_eff * sum_k q_k (w - w_k) / tau_k`` equals this
    scale times the update towards the normalized aggregate.
    """
    q = np.asarray(q, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.all(tau == tau[0]):
        return 1.0
    return float(np.dot(q, tau) * np.sum(q / tau))


def aggregate(models, weights: AggregationWeights) -> ModelParams:
    """``sum_k p_k w_k``, summed in client order so results are reproducible."""
    models = list(models)
    p = weights.p if isinstance(weights, AggregationWeights) else np.asarray(weights, dtype=np.float64)
    if len(models) != p.size:
        raise ValueError(f"{len(models)} models but {p.size} weights")
    shape = models[0].shape
    out = np.zeros(shape.size)
    for pk, m in zip(p, models):
        if m.shape != shape:
            raise ValueError(f"shape mismatch: {m.shape} vs {shape}")
        out += pk * m.values
    return ModelParams(out, shape)


def scaled_server_step(global_prev: ModelParams, aggregate_new: ModelParams, scale: float) -> ModelParams:
    """``w - scale * (w - aggregate)``; scale 1 returns the aggregate."""
    if scale == 1.0:
        return aggregate_new
    _check_same(global_prev, aggregate_new)
    return ModelParams(global_prev.values - scale * (global_prev.values - aggregate_new.values), global_prev.shape)


def _check_same(a: ModelParams, b: ModelParams) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def server_momentum_step(
    global_prev: ModelParams,
    aggregate_new: ModelParams,
    velocity,
    beta: float,
) -> tuple[ModelParams, np.ndarray]:
    """FedAvgM update: ``v <- beta * v + (w - w_agg)``, ``w <- w - v``."""
    _check_same(global_prev, aggregate_new)
    if not 0 <= beta < 1:
        raise ValueError("momentum beta must lie in [0, 1)")
    velocity = np.asarray(velocity, dtype=np.float64)
    if velocity.shape != global_prev.values.shape:
        raise ValueError("velocity shape does not match the model")
    delta = global_prev.values - aggregate_new.values
    new_velocity = beta * velocity + delta
    # w - (beta*v + w - w_agg) rearranged; exact when beta == 0
    new_values = aggregate_new.values - beta * velocity
    return ModelParams(new_values, global_prev.shape), new_velocity
