"""Synthetic heavy-tailed instances, loss constructors, and the
minimax lower-bound lab (packing distributions, constant-weight codes,
and the private Fano bound)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import integrate, stats

from .core import Dataset, MomentSpec, RngStream
from .sco import ConstraintSet, LossOracle

__all__ = [
    "HeavyTailDist",
    "PackingDistribution",
    "FanoParams",
    "student_t_coordwise",
    "student_t_moment",
    "regression_instance",
    "packing_distribution",
    "gv_code",
    "fano_bound",
    "tv_and_kl",
    "make_loss",
]


@dataclass(frozen=True)
class HeavyTailDist:
    """A d-variate distribution with known mean and a certified
    coordinate-wise k-th central absolute moment bound of 1."""

    mean: np.ndarray
    moment: MomentSpec
    name: str
    _sample: Callable[[int, RngStream], np.ndarray]

    def __post_init__(self) -> None:
        mu = np.array(self.mean, dtype=float, copy=True).reshape(-1)
        if mu.size < 1 or not np.all(np.isfinite(mu)):
            raise ValueError("mean must be a finite vector")
        mu.flags.writeable = False
        object.__setattr__(self, "mean", mu)

    @property
    def d(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: RngStream) -> Dataset:
        if not (isinstance(n, (int, np.integer)) and n >= 1):
            raise ValueError(f"n must be a positive integer, got {n}")
        draws = np.asarray(self._sample(int(n), rng), dtype=float)
        return Dataset(draws.reshape(n, -1))


@lru_cache(maxsize=None)
def student_t_moment(k: float, nu: float) -> float:
    """E|T|^k for T Student-t with nu degrees of freedom, by numerical
    integration of the density (requires nu > k)."""
    if not nu > k:
        raise ValueError(f"moment of order {k} needs nu > k, got nu={nu}")
    val, err = integrate.quad(lambda x: 2.0 * x**k * stats.t.pdf(x, nu),
                              0.0, np.inf, limit=200)
    if not (math.isfinite(val) and val > 0 and err < 1e-8 * max(val, 1.0)):
        raise ArithmeticError(f"t-moment integration failed: value {val}, err {err}")
    return val


def student_t_coordwise(k: float, d: int, mu=None,
                        rng: Optional[RngStream] = None) -> HeavyTailDist:
    """Coordinates i.i.d. scaled Student-t with nu = k + 0.1 degrees of
    freedom, scale set so the k-th central absolute moment is exactly 1.
    The (k+1)-th moment is near-divergent, so the tail sits right at the
    assumption boundary. mu defaults to zero; rng is unused (sampling takes
    its own stream) and accepted for interface symmetry.
    """
    if not (math.isfinite(k) and k >= 2):
        raise ValueError(f"k must be >= 2, got {k}")
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"d must be a positive integer, got {d}")
    nu = k + 0.1
    scale = student_t_moment(k, nu) ** (-1.0 / k)
    mu_vec = np.zeros(d) if mu is None else np.asarray(mu, dtype=float).reshape(-1)
    if mu_vec.size != d:
        raise ValueError(f"mu must have length {d}")

    def _sample(n: int, stream: RngStream) -> np.ndarray:
        gen = stream.generator()
        return mu_vec[None, :] + scale * gen.standard_t(nu, size=(n, d))

    return HeavyTailDist(mean=mu_vec, moment=MomentSpec(k=k, gamma=1.0),
                         name=f"student_t:k={k:g}", _sample=_sample)


def regression_instance(k: float, d: int, w_star,
                        rng: Optional[RngStream] = None) -> HeavyTailDist:
    """Rows (a, b): design a uniform on [-1, 1]^d, response
    b = <w_star, a> + e with e scaled Student-t of unit k-th moment.
    The stored mean is (E a, E b) = (0, 0); heavy tails enter only
    through the response noise."""
    if not (math.isfinite(k) and k >= 2):
        raise ValueError(f"k must be >= 2, got {k}")
    w_star = np.asarray(w_star, dtype=float).reshape(-1)
    if w_star.size != d:
        raise ValueError(f"w_star must have length {d}")
    nu = k + 0.1
    scale = student_t_moment(k, nu) ** (-1.0 / k)

    def _sample(n: int, stream: RngStream) -> np.ndarray:
        gen = stream.generator()
        a = gen.uniform(-1.0, 1.0, size=(n, d))
        b = a @ w_star + scale * gen.standard_t(nu, size=n)
        return np.hstack([a, b[:, None]])

    return HeavyTailDist(mean=np.zeros(d + 1), moment=MomentSpec(k=k, gamma=1.0),
                         name=f"regression:k={k:g}", _sample=_sample)


@dataclass(frozen=True)
class PackingDistribution:
    """Two-point mixture: mass 1-p at the origin, mass p at p^(-1/k) nu,
    where nu is a sign pattern with exactly d/2 nonzero entries. Mean and
    central moments are exact by two-point expectation; distinct patterns
    at the same p are at total-variation distance exactly p."""

    nu: np.ndarray
    p: float
    k: float

    def __post_init__(self) -> None:
        nu = np.array(self.nu, dtype=float, copy=True).reshape(-1)
        d = nu.size
        if d < 2 or d % 2 != 0:
            raise ValueError(f"nu must have even length >= 2, got {d}")
        if not np.all(np.isin(nu, (-1.0, 0.0, 1.0))):
            raise ValueError("nu entries must lie in {-1, 0, +1}")
        if np.count_nonzero(nu) != d // 2:
            raise ValueError(f"nu must have exactly {d // 2} nonzero entries")
        nu.flags.writeable = False
        object.__setattr__(self, "nu", nu)
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if not (math.isfinite(self.k) and self.k >= 2):
            raise ValueError(f"k must be >= 2, got {self.k}")

    @property
    def d(self) -> int:
        return self.nu.size

    @property
    def atom(self) -> np.ndarray:
        return self.p ** (-1.0 / self.k) * self.nu

    @property
    def mean(self) -> np.ndarray:
        return self.p ** ((self.k - 1.0) / self.k) * self.nu

    @property
    def mean_norm(self) -> float:
        return self.p ** ((self.k - 1.0) / self.k) * math.sqrt(self.d / 2.0)

    def coordinate_central_moment(self, order: Optional[float] = None) -> float:
        """max_j E|X_j - mean_j|^order, exact from the two-point support
        (defaults to order = k; at most 1 by construction)."""
        r = self.k if order is None else order
        mu = self.p ** ((self.k - 1.0) / self.k)  # |mean_j| on the support pattern
        v = self.p ** (-1.0 / self.k)
        return (1.0 - self.p) * mu**r + self.p * abs(v - mu) ** r

    def sample(self, n: int, rng: RngStream) -> Dataset:
        if not (isinstance(n, (int, np.integer)) and n >= 1):
            raise ValueError(f"n must be a positive integer, got {n}")
        hits = rng.generator().random(n) < self.p
        return Dataset(np.where(hits[:, None], self.atom[None, :], 0.0))

    def as_dict(self) -> Dict[Tuple[float, ...], float]:
        return {tuple(np.zeros(self.d)): 1.0 - self.p, tuple(self.atom): self.p}

    def tv_to(self, other: "PackingDistribution") -> float:
        return tv_and_kl(self.as_dict(), other.as_dict())[0]


def packing_distribution(nu, p: float, k: float) -> PackingDistribution:
    return PackingDistribution(nu=np.asarray(nu, dtype=float), p=p, k=k)


def gv_code(d: int, rng: Optional[RngStream] = None) -> np.ndarray:
    """Constant-weight binary code: words of length d and weight d/2 with
    pairwise Hamming distance >= d/8, grown greedily to ceil(2^(d/8)) words.

    Enumeration is lexicographic for d <= 24 (deterministic) and samples
    random supports beyond that. Falls short of the target only with an
    error reporting the achieved size.
    """
    if not (isinstance(d, (int, np.integer)) and d >= 8 and d % 2 == 0):
        raise ValueError(f"d must be an even integer >= 8, got {d}")
    w = d // 2
    min_dist = d / 8.0
    target = math.ceil(2.0 ** (d / 8.0))

    kept: list = []
    full = (1 << d) - 1

    def consider(mask: int) -> bool:
        for other in kept:
            if bin(mask ^ other).count("1") < min_dist:
                return False
        kept.append(mask)
        return len(kept) >= target

    if d <= 24:
        for supp in itertools.combinations(range(d), w):
            mask = 0
            for i in supp:
                mask |= 1 << i
            if consider(mask):
                break
    else:
        gen = (rng if rng is not None else RngStream(0x67766376)).generator()
        for _ in range(1000 * target):
            supp = gen.permutation(d)[:w]
            mask = 0
            for i in supp:
                mask |= 1 << int(i)
            if consider(mask):
                break

    if len(kept) < target:
        raise ValueError(
            f"constant-weight greedy construction reached only {len(kept)} of "
            f"{target} words at d={d}")
    out = np.zeros((len(kept), d), dtype=np.int8)
    for r, mask in enumerate(kept):
        for i in range(d):
            out[r, i] = (mask >> i) & 1
    return out


@dataclass(frozen=True)
class FanoParams:
    """Inputs to the private Fano bound: separation r, packing size M_count,
    pairwise TV bound alpha, pairwise KL bound beta_kl, privacy rho,
    sample count n."""

    r: float
    M_count: int
    alpha: float
    beta_kl: float
    rho: float
    n: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.r) and self.r >= 0):
            raise ValueError(f"r must be >= 0, got {self.r}")
        if not (isinstance(self.M_count, (int, np.integer)) and self.M_count >= 2):
            raise ValueError(f"M_count must be an integer >= 2, got {self.M_count}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta_kl >= 0:  # +inf allowed
            raise ValueError(f"beta_kl must be >= 0, got {self.beta_kl}")
        if not (math.isfinite(self.rho) and self.rho >= 0):
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ValueError(f"n must be a positive integer, got {self.n}")


def fano_bound(params: FanoParams) -> float:
    """Minimax lower bound on estimation error over an r-separated packing
    of size M under rho-zCDP:
    (r/2) max{1 - (beta + ln2)/lnM, 1 - (rho(n^2 a^2 + n a(1-a)) + ln2)/lnM},
    floored at 0. Natural logarithms."""
    logM = math.log(params.M_count)
    a = params.alpha
    kl_term = 1.0 - (params.beta_kl + math.log(2.0)) / logM
    priv = params.rho * (params.n**2 * a**2 + params.n * a * (1.0 - a))
    priv_term = 1.0 - (priv + math.log(2.0)) / logM
    return max(0.0, (params.r / 2.0) * max(kl_term, priv_term))


def _check_dist(dist: Dict) -> Dict:
    total = math.fsum(dist.values())
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"probabilities sum to {total}, not 1")
    if any(v < 0 for v in dist.values()):
        raise ValueError("probabilities must be nonnegative")
    return dist


def tv_and_kl(p: Dict, q: Dict) -> Tuple[float, float]:
    """Total variation and KL divergence between finite discrete
    distributions given as {support point: probability} maps.
    KL uses 0 log 0 = 0 and is +inf when q misses mass that p has."""
    _check_dist(p)
    _check_dist(q)
    support = set(p) | set(q)
    tv = 0.5 * math.fsum(abs(p.get(s, 0.0) - q.get(s, 0.0)) for s in support)
    kl_parts = []
    for s in support:
        ps, qs = p.get(s, 0.0), q.get(s, 0.0)
        if ps == 0.0:
            continue
        if qs == 0.0:
            return tv, math.inf
        kl_parts.append(ps * math.log(ps / qs))
    return tv, math.fsum(kl_parts)


def make_loss(kind: str, constraint: ConstraintSet, *, k: float = 2.0,
              gamma: float = 1.0, mean_bound: float = 10.0) -> LossOracle:
    """Loss constructors used by the drivers and the lower-bound lab.

    quadratic: 0.5 ||w - x||^2, smooth and 1-strongly convex; its gradient
    w - x inherits the data's coordinate moment bound exactly.
    linear: -<w, x>, gradient independent of w; meant for the lower-bound
    lab with a unit-ball constraint.
    linear_regression: rows (a, b), loss 0.5 (<w, a> - b)^2 with design in
    [-1, 1]^d; convex but not per-sample strongly convex; the gradient
    moment constant is a conservative envelope, not exact.

    mean_bound caps ||E x|| (or ||w_star|| for regression) and enters only
    the R constant of the schedules.
    """
    d = constraint.d
    reach = float(np.linalg.norm(constraint.center)) + constraint.radius

    if kind == "quadratic":
        return LossOracle(
            grad=lambda w, x: w - x,
            value=lambda w, x: 0.5 * float(np.sum((w - x) ** 2)),
            grad_batch=lambda w, X: w[None, :] - X,
            value_batch=lambda w, X: 0.5 * np.sum((w[None, :] - X) ** 2, axis=1),
            smoothness=1.0, strong_convexity=1.0,
            diameter=constraint.diameter,
            grad_mean_bound=reach + mean_bound,
            moment=MomentSpec(k=k, gamma=gamma),
            name="quadratic")
    if kind == "linear":
        return LossOracle(
            grad=lambda w, x: -x,
            value=lambda w, x: -float(np.dot(w, x)),
            grad_batch=lambda w, X: -X,
            value_batch=lambda w, X: -(X @ w),
            smoothness=0.0, strong_convexity=0.0,
            diameter=constraint.diameter,
            grad_mean_bound=mean_bound,
            moment=MomentSpec(k=k, gamma=gamma),
            name="linear")
    if kind == "linear_regression":
        def grad_batch(w, X):
            A, b = X[:, :d], X[:, d]
            return (A @ w - b)[:, None] * A

        def value_batch(w, X):
            A, b = X[:, :d], X[:, d]
            return 0.5 * (A @ w - b) ** 2

        # sup ||a||^2 = d on the [-1,1]^d design; residual-moment envelope
        # 2^(k-1) (E|e|^k + |<w - w*, a>|^k) <= 2^(k-1) (1 + (reach + mean_bound)^k)
        gamma_env = 2.0 ** (k - 1.0) * (1.0 + (reach + mean_bound) ** k) * gamma
        return LossOracle(
            grad=lambda w, x: (float(np.dot(w, x[:d])) - x[d]) * x[:d],
            value=lambda w, x: 0.5 * (float(np.dot(w, x[:d])) - x[d]) ** 2,
            grad_batch=grad_batch,
            value_batch=value_batch,
            smoothness=float(d), strong_convexity=0.0,
            diameter=constraint.diameter,
            grad_mean_bound=(reach + mean_bound) * d / 3.0,
            moment=MomentSpec(k=k, gamma=gamma_env),
            name="linear_regression")
    raise ValueError(f"unknown loss kind {kind!r}")
