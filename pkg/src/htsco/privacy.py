"""Additive noise mechanisms, budget accounting, and conversions between
privacy notions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .core import ApproxDP, PrivacyBudget, PureDP, RngStream, ZCDP

__all__ = [
    "Sensitivity",
    "BudgetLedger",
    "compose",
    "laplace_mechanism",
    "gaussian_mechanism",
    "pure_to_cdp",
    "cdp_to_approx_dp",
    "split_budget",
]


@dataclass(frozen=True)
class Sensitivity:
    """Worst-case change of a vector statistic under one swapped sample.

    Either norm may be omitted when unknown; when both are present the l2
    norm can never exceed the l1 norm.
    """

    l1: Optional[float] = None
    l2: Optional[float] = None

    def __post_init__(self) -> None:
        if self.l1 is None and self.l2 is None:
            raise ValueError("at least one of l1, l2 must be given")
        for name, v in (("l1", self.l1), ("l2", self.l2)):
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.l1 is not None and self.l2 is not None:
            if self.l2 > self.l1 * (1 + 1e-12):
                raise ValueError(f"l2={self.l2} exceeds l1={self.l1}")


@dataclass
class BudgetLedger:
    """Append-only record of privacy charges, one (label, budget) per event.

    All entries must share one budget variant. Ledgers from parallel workers
    merge by concatenation.
    """

    entries: list = field(default_factory=list)

    def charge(self, label: str, budget: PrivacyBudget) -> None:
        if self.entries and type(budget) is not type(self.entries[0][1]):
            raise ValueError(
                f"cannot mix {type(budget).__name__} with "
                f"{type(self.entries[0][1]).__name__} charges"
            )
        self.entries.append((str(label), budget))

    def __add__(self, other: "BudgetLedger") -> "BudgetLedger":
        merged = BudgetLedger(list(self.entries))
        for label, budget in other.entries:
            merged.charge(label, budget)
        return merged

    def total(self) -> PrivacyBudget:
        return compose(self)


def compose(charges: Union[BudgetLedger, Iterable[PrivacyBudget]]) -> PrivacyBudget:
    """Sequential composition: eps adds under pure DP, rho adds under zCDP,
    and (eps, delta) both add for approximate DP. Mixing variants is an error.

    Sums use math.fsum so a budget split T ways recomposes to the original
    within 1 ulp.
    """
    if isinstance(charges, BudgetLedger):
        budgets = [b for _, b in charges.entries]
    else:
        budgets = list(charges)
    if not budgets:
        raise ValueError("nothing to compose")
    kinds = {type(b) for b in budgets}
    if len(kinds) > 1:
        raise ValueError(f"cannot compose mixed variants: {sorted(k.__name__ for k in kinds)}")
    kind = kinds.pop()
    if kind is PureDP:
        return PureDP(math.fsum(b.eps for b in budgets))
    if kind is ZCDP:
        return ZCDP(math.fsum(b.rho for b in budgets))
    if kind is ApproxDP:
        return ApproxDP(
            math.fsum(b.eps for b in budgets), math.fsum(b.delta for b in budgets)
        )
    raise ValueError(f"unknown budget type {kind.__name__}")


def _check_vector(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"mechanism input must be a vector, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("mechanism input must be finite")
    return arr


def laplace_mechanism(value, delta1: float, eps: float, rng: RngStream) -> np.ndarray:
    """Add i.i.d. Laplace(0, delta1/eps) noise per coordinate.

    Satisfies (eps, 0)-DP when delta1 bounds the statistic's l1 sensitivity.
    Zero sensitivity returns the input unchanged.
    """
    arr = _check_vector(value)
    if not (math.isfinite(delta1) and delta1 >= 0):
        raise ValueError(f"delta1 must be finite and >= 0, got {delta1}")
    if not (math.isfinite(eps) and eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    if delta1 == 0.0:
        return arr.copy()
    scale = delta1 / eps
    return arr + rng.generator().laplace(0.0, scale, size=arr.shape)


def gaussian_mechanism(value, delta2: float, rho: float, rng: RngStream) -> np.ndarray:
    """Add i.i.d. N(0, delta2^2 / (2 rho)) noise per coordinate.

    Satisfies rho-zCDP when delta2 bounds the statistic's l2 sensitivity.
    """
    arr = _check_vector(value)
    if not (math.isfinite(delta2) and delta2 >= 0):
        raise ValueError(f"delta2 must be finite and >= 0, got {delta2}")
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    if delta2 == 0.0:
        return arr.copy()
    sigma = delta2 / math.sqrt(2.0 * rho)
    return arr + rng.generator().normal(0.0, sigma, size=arr.shape)


def pure_to_cdp(eps: float) -> float:
    """eps-DP implies (eps^2 / 2)-zCDP."""
    if not (math.isfinite(eps) and eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    return 0.5 * eps * eps


def cdp_to_approx_dp(rho: float, delta: float) -> ApproxDP:
    """rho-zCDP implies (rho + 2 sqrt(rho ln(1/delta)), delta)-DP."""
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    eps = rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))
    return ApproxDP(eps, delta)


def split_budget(rho: float, T: int) -> float:
    """Equal per-step share rho / T; T such charges compose back to rho
    within 1 ulp."""
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValueError(f"T must be a positive integer, got {T}")
    return rho / T
