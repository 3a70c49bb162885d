"""Optimization-error bound for FedAvg with arbitrary weights, and its surrogate.

The bound is ``(T1 + T2 + T3 + T4 + T5) / (1 - 3A - W_D (1 - A))`` with

* ``T1 = 2 (1 - A) F_gap / (tau * eta * T)``
* ``T2 = (1 - A) W_D B sum(d) / K``
* ``T3 = 2 (1 - A) L eta sigma^2 sum(p^2)``
* ``T4 = 2 (tau - 1) sigma^2 L^2 eta^2``
* ``T5 = 2 A B sum(p * d)``
* ``A = 2 tau (tau - 1) eta^2 L^2``

``W_D`` is ``2 sum((n - p)^2)`` (``PlainSum``) or ``2 K sum((n - p)^2)``
(``TimesK``); both conventions are in use, so both are supported.

The surrogate replaces the ratio with ``numerator - lambda * denominator``,
which is quadratic in ``p`` and minimized here over the probability simplex.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np


class WdVariant(str, enum.Enum):
    PLAIN_SUM = "plain_sum"
    TIMES_K = "times_k"

    @classmethod
    def parse(cls, value: "str | WdVariant") -> "WdVariant":
        if isinstance(value, WdVariant):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"plainsum": "plain_sum", "timesk": "times_k"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown W_D variant {value!r}; expected plain_sum or times_k") from None


class VacuousBoundError(ValueError):
    pass


@dataclass(frozen=True)
class BoundParams:
    n: np.ndarray
    d: np.ndarray
    tau: int = 5
    eta: float = 0.02
    L: float = 1.0
    B: float = 1.0
    sigma: float = 1.0
    F_gap: float = 1.0
    lam: float = 0.01
    T: int = 100
    wd_variant: WdVariant = WdVariant.TIMES_K

    def __post_init__(self) -> None:
        n = np.asarray(self.n, dtype=np.float64)
        d = np.asarray(self.d, dtype=np.float64)
        if n.ndim != 1 or n.shape != d.shape or n.size == 0:
            raise ValueError("n and d must be vectors of the same non-zero length")
        if np.any(n < 0) or abs(n.sum() - 1.0) > 1e-9:
            raise ValueError("n must be non-negative and sum to 1")
        if np.any(d < 0):
            raise ValueError("discrepancies d must be non-negative")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "wd_variant", WdVariant.parse(self.wd_variant))
        if self.tau < 1 or self.T < 1:
            raise ValueError("tau and T must be >= 1")
        for name in ("eta", "L", "B"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("sigma", "F_gap", "lam"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.A < 1:
            raise ValueError(f"A = 2 tau (tau-1) eta^2 L^2 must be < 1 (got {self.A})")
        if self.eta * self.L > 1.0 / (2 * self.tau) + 1e-15:
            raise ValueError("the bound needs eta * L <= 1 / (2 tau)")

    @property
    def K(self) -> int:
        return int(self.n.size)

    @property
    def A(self) -> float:
        return 2.0 * self.tau * (self.tau - 1) * self.eta ** 2 * self.L ** 2

    @property
    def wd_factor(self) -> float:
        return 2.0 * self.K if self.wd_variant is WdVariant.TIMES_K else 2.0


def w_d(p, bp: BoundParams) -> float:
    p = np.asarray(p, dtype=np.float64)
    return bp.wd_factor * float(np.sum((bp.n - p) ** 2))


def bound_terms(p, bp: BoundParams) -> dict[str, float]:
    """Every named piece of the bound at weights ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != bp.n.shape:
        raise ValueError("p must have one entry per client")
    A = bp.A
    wd = w_d(p, bp)
    t1 = 2.0 * (1 - A) * bp.F_gap / (bp.tau * bp.eta * bp.T)
    t2 = (1 - A) * wd * bp.B * float(bp.d.sum()) / bp.K
    t3 = 2.0 * (1 - A) * bp.L * bp.eta * bp.sigma ** 2 * float(np.sum(p ** 2))
    t4 = 2.0 * (bp.tau - 1) * bp.sigma ** 2 * bp.L ** 2 * bp.eta ** 2
    t5 = 2.0 * A * bp.B * float(np.dot(p, bp.d))
    return {
        "A": A,
        "W_D": wd,
        "T1": t1,
        "T2": t2,
        "T3": t3,
        "T4": t4,
        "T5": t5,
        "numerator": t1 + t2 + t3 + t4 + t5,
        "denominator": 1.0 - 3.0 * A - wd * (1 - A),
    }


def original_bound(p, bp: BoundParams) -> float:
    terms = bound_terms(p, bp)
    if terms["denominator"] <= 0:
        raise VacuousBoundError(f"vacuous bound region (denominator {terms['denominator']:.6g} <= 0)")
    return terms["numerator"] / terms["denominator"]


def reformulated_objective(p, bp: BoundParams) -> float:
    terms = bound_terms(p, bp)
    return terms["numerator"] - bp.lam * terms["denominator"]


def reformulated_gradient(p, bp: BoundParams) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    A = bp.A
    dwd = 2.0 * bp.wd_factor * (p - bp.n)
    grad = (1 - A) * bp.B * float(bp.d.sum()) / bp.K * dwd
    grad = grad + 4.0 * (1 - A) * bp.L * bp.eta * bp.sigma ** 2 * p
    grad = grad + 2.0 * A * bp.B * bp.d
    grad = grad + bp.lam * (1 - A) * dwd
    return grad


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{p : p >= 0, sum(p) = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


@dataclass
class TrajectoryStep:
    step: int
    p: np.ndarray
    reformulated: float
    original: float
    numerator: float
    denominator: float


@dataclass
class BoundTrajectory:
    params: BoundParams
    steps: list[TrajectoryStep] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps], dtype=np.float64)

    def write_csv(self, path) -> None:
        """Columns: step, reformulated, original, p_1..p_K, numerator, denominator."""
        K = self.params.K
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "reformulated", "original", *[f"p_{k + 1}" for k in range(K)], "numerator", "denominator"])
            for s in self.steps:
                writer.writerow([s.step, _fmt(s.reformulated), _fmt(s.original), *[_fmt(x) for x in s.p], _fmt(s.numerator), _fmt(s.denominator)])


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def _record(step: int, p: np.ndarray, bp: BoundParams) -> TrajectoryStep:
    terms = bound_terms(p, bp)
    den = terms["denominator"]
    original = terms["numerator"] / den if den > 0 else math.nan
    return TrajectoryStep(
        step=step,
        p=p.copy(),
        reformulated=terms["numerator"] - bp.lam * den,
        original=original,
        numerator=terms["numerator"],
        denominator=den,
    )


def minimize_reformulated(
    bp: BoundParams,
    steps: int = 400,
    step_size: float = 1e-3,
    max_halvings: int = 30,
) -> BoundTrajectory:
    """Projected gradient descent on the surrogate, starting from ``p = n``.

    A step that would raise the surrogate is retried with the step size
    halved, up to ``max_halvings`` times; if none helps, ``p`` stays put.
    The original bound is recorded as NaN wherever it is vacuous.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not step_size > 0:
        raise ValueError("step_size must be > 0")
    p = bp.n.copy()
    traj = BoundTrajectory(bp)
    traj.steps.append(_record(0, p, bp))
    current = traj.steps[-1].reformulated
    for k in range(1, steps + 1):
        grad = reformulated_gradient(p, bp)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient at step {k}")
        lr = step_size
        for _ in range(max_halvings + 1):
            candidate = project_simplex(p - lr * grad)
            value = reformulated_objective(candidate, bp)
            if value <= current:
                p, current = candidate, value
                break
            lr *= 0.5
        traj.steps.append(_record(k, p, bp))
    return traj


@dataclass(frozen=True)
class ClosedFormWeights:
    """Minimizer of the surrogate plus the ``n_k - a d_k + b`` form it induces."""

    p: np.ndarray
    a: float
    b: float
    mu: float


def closed_form_weights(bp: BoundParams) -> ClosedFormWeights:
    """Solve the surrogate's KKT conditions in closed form.

    Stationarity gives ``p_k = (G n_k - 2 A B d_k - mu + nu_k) / (G + H)`` with
    ``G = 2 wd_factor (1 - A)(B sum(d) / K + lambda)`` and
    ``H = 4 (1 - A) L eta sigma^2``. For ``TimesK`` ``G`` reduces to
    ``4 (1 - A)(B sum(d) + K lambda)``. The multipliers ``nu_k >= 0`` zero out
    negative entries and ``mu`` makes the weights sum to 1. Together that is
    the simplex projection of ``(G n - 2 A B d) / (G + H)``.
    """
    A = bp.A
    G = 2.0 * bp.wd_factor * (1 - A) * (bp.B * float(bp.d.sum()) / bp.K + bp.lam)
    H = 4.0 * (1 - A) * bp.L * bp.eta * bp.sigma ** 2
    denom = G + H
    if not denom > 0:
        raise ValueError("degenerate denominator in closed-form weights")
    v = (G * bp.n - 2.0 * A * bp.B * bp.d) / denom
    p = project_simplex(v)
    # p = max(v - theta, 0) with theta = mu / (G + H); read theta off an active entry
    active = p > 0
    theta = float(np.mean(v[active] - p[active]))
    mu = theta * denom
    if G > 0:
        a, b = 2.0 * A * bp.B / G, -mu / G
    else:
        a = b = math.nan
    return ClosedFormWeights(p=p, a=a, b=b, mu=mu)


def default_bound_params(**overrides) -> BoundParams:
    """K = 10 instance: uniform n, d evenly spaced over [0.05, 0.5]."""
    K = int(overrides.pop("K", 10))
    base = dict(
        n=np.full(K, 1.0 / K),
        d=np.linspace(0.05, 0.5, K),
        tau=5,
        eta=0.02,
        L=1.0,
        B=1.0,
        sigma=1.0,
        F_gap=1.0,
        lam=0.01,
        T=100,
        wd_variant=WdVariant.TIMES_K,
    )
    base.update(overrides)
    return BoundParams(**base)
