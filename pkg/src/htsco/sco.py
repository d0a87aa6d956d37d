"""Projected-gradient stochastic convex optimization driven by private
mean-estimation oracles.

`scof` is the generic loop: at each step the gradients of the loss over the
step's sample set are handed to a mean-estimation oracle (private or not),
and the iterate takes a projected step against the estimate. The three
`cdp_sco_*` drivers wire in the matching oracle, truncation scale, step
count, and step size, split the zCDP budget evenly across steps, and
return the averaged iterate (convex) or the last iterate (strongly convex).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .core import Dataset, MomentSpec, RngStream, ScheduleWarning
from .estimators import (
    HdmeConfig,
    MeanEstimate,
    NsmeConfig,
    cdp_hdme,
    cdp_nsme,
    recommended_tau,
)
from .privacy import BudgetLedger, split_budget

__all__ = [
    "T_CAP",
    "ConstraintSet",
    "LossOracle",
    "Trajectory",
    "SCOResult",
    "project_ball",
    "scof",
    "cdp_sco_convex_hdme",
    "cdp_sco_convex_nsme",
    "cdp_sco_strongly_convex",
    "excess_risk",
]

T_CAP = 10**6  # hard iteration cap for desk-scale runs
_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class ConstraintSet:
    """Euclidean ball, the only constraint shape the schedules support."""

    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        c = np.array(self.center, dtype=float, copy=True).reshape(-1)
        if c.size < 1 or not np.all(np.isfinite(c)):
            raise ValueError("center must be a finite vector")
        c.flags.writeable = False
        object.__setattr__(self, "center", c)
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"radius must be positive, got {self.radius}")

    @property
    def d(self) -> int:
        return self.center.size

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def contains(self, w: np.ndarray, tol: float = _FEAS_TOL) -> bool:
        return float(np.linalg.norm(np.asarray(w, dtype=float) - self.center)) \
            <= self.radius * (1.0 + tol) + tol


def project_ball(theta: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """Euclidean projection onto the ball; identity for interior points."""
    theta = np.asarray(theta, dtype=float)
    gap = theta - cset.center
    dist = float(np.linalg.norm(gap))
    if dist <= cset.radius:
        return theta.copy()
    return cset.center + (cset.radius / dist) * gap


@dataclass(frozen=True)
class LossOracle:
    """A per-sample loss with the constants the schedules consume.

    grad(w, x) and value(w, x) must be pure and finite on the constraint set
    times the data support. smoothness is L, strong_convexity is lambda
    (0 when merely convex), diameter is the constraint-set diameter M,
    grad_mean_bound is R with E grad(w, X) in B_R(0). grad_batch/value_batch
    are optional vectorized forms taking the full (n, d) sample block.
    """

    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    value: Callable[[np.ndarray, np.ndarray], float]
    smoothness: float
    strong_convexity: float
    diameter: float
    grad_mean_bound: float
    moment: MomentSpec
    grad_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    value_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = ""

    def __post_init__(self) -> None:
        if not (math.isfinite(self.smoothness) and self.smoothness >= 0):
            raise ValueError(f"smoothness must be >= 0, got {self.smoothness}")
        if not (0 <= self.strong_convexity <= self.smoothness):
            raise ValueError(
                f"need 0 <= strong_convexity <= smoothness, got "
                f"{self.strong_convexity} vs {self.smoothness}")
        if not (math.isfinite(self.diameter) and self.diameter > 0):
            raise ValueError(f"diameter must be positive, got {self.diameter}")
        if not (math.isfinite(self.grad_mean_bound) and self.grad_mean_bound > 0):
            raise ValueError(f"grad_mean_bound must be positive, got {self.grad_mean_bound}")


def _grads(loss: LossOracle, w: np.ndarray, block: np.ndarray) -> np.ndarray:
    if loss.grad_batch is not None:
        out = np.asarray(loss.grad_batch(w, block), dtype=float)
    else:
        out = np.stack([np.asarray(loss.grad(w, x), dtype=float) for x in block])
    if out.shape != (block.shape[0], w.size) or not np.all(np.isfinite(out)):
        raise ValueError("loss gradients must be finite (n, d) for the sample block")
    return out


def _values(loss: LossOracle, w: np.ndarray, block: np.ndarray) -> np.ndarray:
    if loss.value_batch is not None:
        return np.asarray(loss.value_batch(w, block), dtype=float)
    return np.array([float(loss.value(w, x)) for x in block])


@dataclass(frozen=True)
class Trajectory:
    """iterates holds w^0..w^T (T+1 rows, all inside the constraint set);
    gradient_estimates the T oracle outputs; budgets the per-step charge
    (None for non-private oracles)."""

    iterates: np.ndarray
    gradient_estimates: np.ndarray
    budgets: tuple
    constraint: ConstraintSet

    def __post_init__(self) -> None:
        it = np.array(self.iterates, dtype=float, copy=True)
        ge = np.array(self.gradient_estimates, dtype=float, copy=True)
        if it.ndim != 2 or ge.ndim != 2 or it.shape[0] != ge.shape[0] + 1:
            raise ValueError("need T+1 iterates and T gradient estimates")
        if len(self.budgets) != ge.shape[0]:
            raise ValueError("need one budget entry per step")
        gaps = np.linalg.norm(it - self.constraint.center[None, :], axis=1)
        if np.any(gaps > self.constraint.radius * (1 + _FEAS_TOL) + _FEAS_TOL):
            raise ValueError("trajectory leaves the constraint set")
        it.flags.writeable = False
        ge.flags.writeable = False
        object.__setattr__(self, "iterates", it)
        object.__setattr__(self, "gradient_estimates", ge)
        object.__setattr__(self, "budgets", tuple(self.budgets))

    @property
    def T(self) -> int:
        return self.gradient_estimates.shape[0]


def scof(dataset: Dataset, loss: LossOracle,
         oracle: Callable[[Dataset, RngStream], MeanEstimate],
         eta: float, T: int, mode: str, constraint: ConstraintSet,
         rng: RngStream, w0: Optional[np.ndarray] = None) -> Trajectory:
    """Projected-gradient loop with an oracle in place of the true gradient.

    mode="convex": every step sees the full dataset. mode="strongly_convex":
    step t sees the t-th of T disjoint contiguous batches of size floor(n/T)
    (trailing remainder unused). The oracle is called exactly once per step
    on the gradient multiset {grad(w^{t-1}, x): x in S_t}.
    """
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (math.isfinite(eta) and eta > 0):
        raise ValueError(f"eta must be positive, got {eta}")
    if mode not in ("convex", "strongly_convex"):
        raise ValueError(f"mode must be 'convex' or 'strongly_convex', got {mode!r}")
    if mode == "strongly_convex" and dataset.n < T:
        raise ValueError(f"strongly_convex mode needs n >= T, got n={dataset.n}, T={T}")

    w = np.array(constraint.center if w0 is None else w0, dtype=float).reshape(-1)
    if not constraint.contains(w):
        raise ValueError("w0 lies outside the constraint set")

    b = dataset.n // T
    iterates = np.empty((T + 1, constraint.d))
    estimates = np.empty((T, constraint.d))
    budgets: List = []
    iterates[0] = w
    for t in range(1, T + 1):
        if mode == "convex":
            block = dataset.samples
        else:
            block = dataset.samples[(t - 1) * b: t * b]
        grad_ds = Dataset(_grads(loss, w, block))
        est = oracle(grad_ds, rng.child("step", t))
        w = project_ball(w - eta * est.value, constraint)
        iterates[t] = w
        estimates[t - 1] = est.value
        budgets.append(est.budget_spent)
    return Trajectory(iterates=iterates, gradient_estimates=estimates,
                      budgets=tuple(budgets), constraint=constraint)


@dataclass(frozen=True)
class SCOResult:
    """Driver output: the released point, the full trajectory, the per-step
    budget ledger, and the schedule actually used."""

    w_priv: np.ndarray
    trajectory: Trajectory
    ledger: BudgetLedger
    tau: float
    T: int
    eta: float
    q: Optional[float] = None
    calibration: Optional[str] = None


def _resolve_convex_T(raw: float) -> int:
    if not math.isfinite(raw) or raw < 1.0:
        warnings.warn(f"step-count formula gave {raw:.4g}; clamping to 1",
                      ScheduleWarning, stacklevel=3)
        return 1
    if raw > T_CAP:
        warnings.warn(
            f"step-count formula gave {raw:.4g}; capping at {T_CAP} "
            "(schedule constant not met)", ScheduleWarning, stacklevel=3)
        return T_CAP
    return int(raw)


def _run_convex(dataset: Dataset, loss: LossOracle, rho: float, rng: RngStream,
                oracle, tau: float, T_raw: float, constraint: ConstraintSet,
                **result_extra) -> SCOResult:
    T = _resolve_convex_T(T_raw)
    eta = loss.diameter / (loss.grad_mean_bound * math.sqrt(T))
    rho_step = split_budget(rho, T)
    traj = scof(dataset, loss, oracle(rho_step), eta, T, "convex", constraint, rng)
    ledger = BudgetLedger()
    for t, charge in enumerate(traj.budgets):
        ledger.charge(f"step-{t + 1}", charge)
    w_priv = traj.iterates[1:].mean(axis=0)
    return SCOResult(w_priv=w_priv, trajectory=traj, ledger=ledger,
                     tau=tau, T=T, eta=eta, **result_extra)


def _center_constraint(loss: LossOracle, dataset: Dataset) -> ConstraintSet:
    return ConstraintSet(center=np.zeros(dataset.d), radius=loss.diameter / 2.0)


def cdp_sco_convex_hdme(dataset: Dataset, loss: LossOracle, rho: float,
                        rng: RngStream, beta: float = 0.1,
                        constraint: Optional[ConstraintSet] = None) -> SCOResult:
    """Convex driver with the batched-median oracle.

    Schedule: tau = (sqrt(rho) n / (M d^1.5))^(1/k), T = floor of
    R^2 rho n^2 / (tau^2 d^4) clamped to [1, T_CAP], eta = M / (R sqrt T),
    each step charged rho/T. Returns the average of iterates 1..T.
    """
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    cset = _center_constraint(loss, dataset) if constraint is None else constraint
    n, d = dataset.n, cset.d  # d is the parameter dimension
    tau = recommended_tau("sco_convex_hdme", n=n, d=d, k=loss.moment.k,
                          rho=rho, M=loss.diameter)
    T_raw = loss.grad_mean_bound**2 * rho * n**2 / (tau**2 * d**4)
    cfg = HdmeConfig.from_beta(tau, beta, d)

    def oracle(rho_step):
        return lambda gds, srng: cdp_hdme(gds, cfg, rho_step, srng)

    return _run_convex(dataset, loss, rho, rng, oracle, tau, T_raw, cset)


def cdp_sco_convex_nsme(dataset: Dataset, loss: LossOracle, rho: float,
                        q: float, rng: RngStream, c: float = 1.0,
                        calibration: str = "exact",
                        constraint: Optional[ConstraintSet] = None) -> SCOResult:
    """Convex driver with the smoothed-influence oracle.

    Schedule: tau = (sqrt(rho) n / (M d^q))^(1/2) for q in [0.5, 2],
    T = floor of R^2 rho n^2 / (tau^2 d^2) clamped, eta = M / (R sqrt T).
    """
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    if not (0.5 <= q <= 2.0):
        raise ValueError(f"q must lie in [0.5, 2], got {q}")
    cset = _center_constraint(loss, dataset) if constraint is None else constraint
    n, d = dataset.n, cset.d
    tau = recommended_tau("sco_convex_nsme", n=n, d=d, q=q, rho=rho, M=loss.diameter)
    T_raw = loss.grad_mean_bound**2 * rho * n**2 / (tau**2 * d**2)
    cfg = NsmeConfig(tau=tau, c=c)

    def oracle(rho_step):
        return lambda gds, srng: cdp_nsme(gds, cfg, rho_step, srng,
                                          calibration=calibration)

    return _run_convex(dataset, loss, rho, rng, oracle, tau, T_raw, cset,
                       q=q, calibration=calibration)


def resolve_strongly_convex_T(n: int, d: int, k: float, rho: float,
                              lam: float, L: float) -> int:
    """Step count for the strongly convex schedule.

    T solves T = log(z) / log((lam^2 + L^2 + lam L) / (lam + L)^2) with
    z = (lam + L) G(T) / (lam L), where G(T) is the oracle error expression
    log(n) log(d+1) (sqrt(Td/n) + sqrt(d) (sqrt(d) T^1.5 / (sqrt(rho) n))^((k-1)/k)).
    Both logs are negative when z < 1, giving a positive ratio. The map is
    decreasing in T, so plain iteration 2-cycles; averaging each iterate with
    its image converges. Any z >= 1 along the way is degenerate (the error
    term is too large for the contraction argument) and falls back to
    ceil(log n) with a warning.
    """
    if lam <= 0:
        raise ValueError("strongly convex schedule needs lam > 0")
    denom = math.log((lam**2 + L**2 + lam * L) / (lam + L) ** 2)
    polylog = math.log(n) * math.log(d + 1)

    def step(T: float) -> Optional[float]:
        G = polylog * (math.sqrt(T * d / n)
                       + math.sqrt(d) * (math.sqrt(d) * T**1.5 / (math.sqrt(rho) * n))
                       ** ((k - 1.0) / k))
        z = (lam + L) * G / (lam * L)
        if z >= 1.0:
            return None
        return math.log(z) / denom

    x = 1.0
    for _ in range(100):
        nxt = step(x)
        if nxt is None:
            fallback = max(1, math.ceil(math.log(n)))
            warnings.warn(
                "strongly convex step-count equation is degenerate at this "
                f"(n, d, rho); using T = ceil(log n) = {fallback}",
                ScheduleWarning, stacklevel=2)
            return fallback
        if abs(nxt - x) < 1e-12:
            x = nxt
            break
        x = 0.5 * (x + nxt)
    return max(1, math.ceil(x))


def cdp_sco_strongly_convex(dataset: Dataset, loss: LossOracle, rho: float,
                            rng: RngStream, beta: float = 0.1,
                            constraint: Optional[ConstraintSet] = None) -> SCOResult:
    """Strongly convex driver: T from the fixed-point schedule, disjoint
    contiguous batches of floor(n/T) samples, eta = 1/(lam + L),
    tau = (sqrt(rho) n / (sqrt d T^1.5))^(1/k); returns the last iterate.
    """
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    lam, L = loss.strong_convexity, loss.smoothness
    cset = _center_constraint(loss, dataset) if constraint is None else constraint
    n, d = dataset.n, cset.d
    T = resolve_strongly_convex_T(n, d, loss.moment.k, rho, lam, L)
    if n < T:
        raise ValueError(f"need n >= T, got n={n} with resolved T={T}")
    eta = 1.0 / (lam + L)
    tau = recommended_tau("sco_strongly_convex", n=n, d=d, k=loss.moment.k,
                          rho=rho, T=T)
    cfg = HdmeConfig.from_beta(tau, beta, d)
    rho_step = split_budget(rho, T)
    traj = scof(dataset, loss,
                lambda gds, srng: cdp_hdme(gds, cfg, rho_step, srng),
                eta, T, "strongly_convex", cset, rng)
    ledger = BudgetLedger()
    for t, charge in enumerate(traj.budgets):
        ledger.charge(f"step-{t + 1}", charge)
    return SCOResult(w_priv=traj.iterates[-1].copy(), trajectory=traj,
                     ledger=ledger, tau=tau, T=T, eta=eta)


def excess_risk(loss: LossOracle, test_samples: Dataset, w: np.ndarray,
                w_star: np.ndarray) -> tuple:
    """Monte Carlo excess risk of w over w_star on held-out samples:
    mean of loss(w, x) - loss(w_star, x), returned with its standard error."""
    w = np.asarray(w, dtype=float).reshape(-1)
    w_star = np.asarray(w_star, dtype=float).reshape(-1)
    diffs = _values(loss, w, test_samples.samples) \
        - _values(loss, w_star, test_samples.samples)
    m = diffs.size
    stderr = float(np.std(diffs, ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return float(diffs.mean()), stderr
