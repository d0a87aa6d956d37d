"""Private mean estimators for heavy-tailed data.

Two families:

* truncated median-of-means (``hdme``): clip to a window of width 6*tau,
  average contiguous batches, take the coordinate-wise median; privatized
  with Gaussian (zCDP) or Laplace (pure DP) noise,
* smoothed Catoni-style influence averaging (``nsme``): each sample passes
  through a bounded odd influence function averaged over multiplicative
  Gaussian smoothing, which caps the worst-case sensitivity at
  (4 sqrt 2 / 3) tau sqrt(d) / n regardless of the data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.special import ndtr

from .core import Dataset, PrivacyBudget, RngStream, ScheduleWarning, ZCDP, PureDP, batch_bounds
from .privacy import Sensitivity, gaussian_mechanism, laplace_mechanism

__all__ = [
    "SQRT2",
    "PHI_SAT",
    "TAU_FLOOR",
    "HdmeConfig",
    "NsmeConfig",
    "MeanEstimate",
    "hdme",
    "hdme_sensitivity",
    "cdp_hdme",
    "dp_hdme",
    "catoni_phi",
    "smoothed_phi",
    "nsme",
    "cdp_nsme",
    "recommended_tau",
]

SQRT2 = math.sqrt(2.0)
PHI_SAT = 2.0 * SQRT2 / 3.0  # saturation level of the influence function
TAU_FLOOR = 10.0
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_Z_CLAMP = 40.0  # beyond 40 sigma the Gaussian mass underflows double precision
# fixed rule over the cubic window [-sqrt2, sqrt2], used when the Gaussian is
# wide relative to the window (the moment expansion cancels there)
_GL_T, _GL_W = np.polynomial.legendre.leggauss(32)
_WIN_Y = SQRT2 * _GL_T
_WIN_W = SQRT2 * _GL_W
_WIN_G = _WIN_W * (_WIN_Y - _WIN_Y**3 / 6.0)


@dataclass(frozen=True)
class HdmeConfig:
    """Truncated median-of-means settings.

    tau is the truncation scale (window [center - 3 tau, center + 3 tau]),
    m the number of contiguous batches. ``from_beta`` derives m from a
    failure probability beta as ceil(4 ln(2 d / beta)).
    """

    tau: float
    m: int
    beta: Optional[float] = None
    center: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (isinstance(self.m, (int, np.integer)) and self.m >= 1):
            raise ValueError(f"m must be a positive integer, got {self.m}")
        if self.beta is not None and not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not math.isfinite(self.center):
            raise ValueError("center must be finite")

    @classmethod
    def from_beta(cls, tau: float, beta: float, d: int, center: float = 0.0) -> "HdmeConfig":
        if not (0.0 < beta < 1.0):
            raise ValueError(f"beta must lie in (0, 1), got {beta}")
        if not (isinstance(d, (int, np.integer)) and d >= 1):
            raise ValueError(f"d must be a positive integer, got {d}")
        m = math.ceil(4.0 * math.log(2.0 * d / beta))
        return cls(tau=tau, m=int(m), beta=beta, center=center)


@dataclass(frozen=True)
class NsmeConfig:
    """Smoothed influence-average settings: truncation scale tau, smoothing
    variance c of the multiplicative noise, and node count for the
    quadrature cross-check."""

    tau: float
    c: float = 1.0
    nodes: int = 64

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"c must be >= 0, got {self.c}")
        if not (isinstance(self.nodes, (int, np.integer)) and self.nodes >= 2):
            raise ValueError(f"nodes must be an integer >= 2, got {self.nodes}")


@dataclass(frozen=True)
class MeanEstimate:
    """A mean estimate plus the provenance needed for auditing.

    noise_sigma is the per-coordinate noise scale actually added (Gaussian
    std or Laplace scale); it is 0 exactly when budget_spent is None.
    """

    value: np.ndarray
    tau_used: float
    m_used: Optional[int]
    budget_spent: Optional[PrivacyBudget]
    noise_sigma: float
    calibration: Optional[str] = None

    def __post_init__(self) -> None:
        arr = np.array(self.value, dtype=float, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "value", arr)
        if (self.budget_spent is None) != (self.noise_sigma == 0.0):
            raise ValueError("noise_sigma must be 0 exactly for non-private estimates")


def hdme(dataset: Dataset, cfg: HdmeConfig) -> MeanEstimate:
    """Clip to [center - 3 tau, center + 3 tau], split into m contiguous
    batches (the last absorbs the remainder), average each batch at its
    actual size, and take the coordinate-wise median of the batch means.

    Deterministic; every output coordinate lies inside the clip window.
    """
    n = dataset.n
    if n < cfg.m:
        raise ValueError(f"n={n} is smaller than batch count m={cfg.m} (beta too small for n)")
    lo = cfg.center - 3.0 * cfg.tau
    hi = cfg.center + 3.0 * cfg.tau
    clipped = np.clip(dataset.samples, lo, hi)
    bounds = batch_bounds(n, cfg.m)
    starts = np.array([a for a, _ in bounds], dtype=np.intp)
    sizes = np.array([b - a for a, b in bounds], dtype=float)
    means = np.add.reduceat(clipped, starts, axis=0) / sizes[:, None]
    value = np.median(means, axis=0)
    return MeanEstimate(value=value, tau_used=cfg.tau, m_used=cfg.m,
                        budget_spent=None, noise_sigma=0.0)


def hdme_sensitivity(cfg: HdmeConfig, n: int, d: int) -> Sensitivity:
    """Worst-case shift of the batched median under one swapped sample.

    One sample lives in one batch; its batch mean moves by at most the clip
    width over the batch size, and the midpoint median is 1-Lipschitz in any
    single batch mean. The smallest batch, floor(n/m), gives the
    conservative bound; with even batches this is 6 tau m / n per
    coordinate.
    """
    if not (isinstance(n, (int, np.integer)) and n >= cfg.m):
        raise ValueError(f"need n >= m, got n={n}, m={cfg.m}")
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"d must be a positive integer, got {d}")
    per_coord = 6.0 * cfg.tau / (n // cfg.m)
    return Sensitivity(l1=d * per_coord, l2=math.sqrt(d) * per_coord)


def cdp_hdme(dataset: Dataset, cfg: HdmeConfig, rho: float, rng: RngStream) -> MeanEstimate:
    """Batched-median estimate plus Gaussian noise calibrated to
    sigma^2 = d * (per-coordinate sensitivity)^2 / rho.

    That is twice the minimal Gaussian-mechanism variance for the l2
    sensitivity, so the release is rho-zCDP with slack; with even batches
    sigma^2 = 36 tau^2 m^2 d / (rho n^2).
    """
    est = hdme(dataset, cfg)
    sens = hdme_sensitivity(cfg, dataset.n, dataset.d)
    noisy = gaussian_mechanism(est.value, SQRT2 * sens.l2, rho, rng)
    return MeanEstimate(value=noisy, tau_used=cfg.tau, m_used=cfg.m,
                        budget_spent=ZCDP(rho), noise_sigma=sens.l2 / math.sqrt(rho))


def dp_hdme(dataset: Dataset, cfg: HdmeConfig, eps: float, rng: RngStream) -> MeanEstimate:
    """Batched-median estimate plus per-coordinate Laplace noise at scale
    l1-sensitivity / eps; with even batches the scale is 6 tau m d / (eps n).
    Pure (eps, 0)-DP."""
    est = hdme(dataset, cfg)
    sens = hdme_sensitivity(cfg, dataset.n, dataset.d)
    noisy = laplace_mechanism(est.value, sens.l1, eps, rng)
    return MeanEstimate(value=noisy, tau_used=cfg.tau, m_used=cfg.m,
                        budget_spent=PureDP(eps), noise_sigma=sens.l1 / eps)


def catoni_phi(x):
    """Bounded odd influence function: x - x^3/6 on [-sqrt2, sqrt2],
    saturating at +-2 sqrt2 / 3 outside. Scalar in, scalar out."""
    scalar = np.isscalar(x)
    arr = np.asarray(x, dtype=float)
    inner = arr - arr**3 / 6.0
    out = np.where(np.abs(arr) <= SQRT2, inner, np.sign(arr) * PHI_SAT)
    return float(out) if scalar else out


def _closed_form_array(a: np.ndarray, c: float) -> np.ndarray:
    """E phi(a (1 + N)), N ~ N(0, c): saturated tail masses plus the integral
    of the cubic piece over [-sqrt2, sqrt2].

    The cubic piece uses truncated-Gaussian partial moments while the
    Gaussian std |a| sqrt(c) is at most the window scale; beyond that the
    moment terms cancel catastrophically (error grows like |a|^3 ulp), so
    the integral switches to a fixed 32-node rule over the window, where the
    integrand is slowly varying. Both branches are exact to ~1e-15.
    """
    out = catoni_phi(a)
    if c == 0.0:
        return out
    # sigma underflowing to 0 (subnormal a * c) degenerates to plain phi
    mask = np.abs(a) * math.sqrt(c) > 0.0
    if not np.any(mask):
        return out
    av = a[mask]
    sig = np.abs(av) * math.sqrt(c)
    with np.errstate(over="ignore"):  # huge z-scores clamp anyway
        al = np.clip((-SQRT2 - av) / sig, -_Z_CLAMP, _Z_CLAMP)
        be = np.clip((SQRT2 - av) / sig, -_Z_CLAMP, _Z_CLAMP)
    Fa, Fb = ndtr(al), ndtr(be)
    tails = PHI_SAT * (1.0 - Fb) - PHI_SAT * Fa

    cubic = np.empty_like(av)
    narrow = sig <= 1.0
    if np.any(narrow):
        aln, ben, sn, an = al[narrow], be[narrow], sig[narrow], av[narrow]
        fa = np.exp(-0.5 * aln * aln) * _INV_SQRT_2PI
        fb = np.exp(-0.5 * ben * ben) * _INV_SQRT_2PI
        m0 = Fb[narrow] - Fa[narrow]
        m1 = fa - fb
        m2 = m0 + aln * fa - ben * fb
        m3 = 2.0 * m1 + aln * aln * fa - ben * ben * fb
        ey = an * m0 + sn * m1
        ey3 = an**3 * m0 + 3.0 * an**2 * sn * m1 + 3.0 * an * sn**2 * m2 + sn**3 * m3
        cubic[narrow] = ey - ey3 / 6.0
    wide = ~narrow
    if np.any(wide):
        t = (_WIN_Y[None, :] - av[wide, None]) / sig[wide, None]
        cubic[wide] = np.exp(-0.5 * t * t) @ _WIN_G * _INV_SQRT_2PI / sig[wide]

    out[mask] = cubic + tails
    return out


def _quadrature_scalar(a: float, c: float, nodes: int) -> float:
    """Independent cross-check: exact Gaussian masses on the saturated
    tails plus a Gauss-Legendre rule on the cubic segment, split at the
    kinks so the integrand each rule sees is smooth."""
    if a == 0.0 or c == 0.0:
        return catoni_phi(a)
    sig = math.sqrt(c)
    k1 = -SQRT2 / a - 1.0
    k2 = SQRT2 / a - 1.0
    z1, z2 = min(k1, k2), max(k1, k2)
    lo_sign = math.copysign(1.0, a * z1)
    hi_sign = math.copysign(1.0, a * (2.0 + z2))
    total = lo_sign * PHI_SAT * float(ndtr(z1 / sig))
    total += hi_sign * PHI_SAT * float(1.0 - ndtr(z2 / sig))
    lo = max(z1, -12.0 * sig)
    hi = min(z2, 12.0 * sig)
    if lo < hi:
        t, w = np.polynomial.legendre.leggauss(int(nodes))
        z = 0.5 * (hi - lo) * t + 0.5 * (hi + lo)
        y = a * (1.0 + z)
        g = (y - y**3 / 6.0) * np.exp(-z * z / (2.0 * c)) / math.sqrt(2.0 * math.pi * c)
        total += 0.5 * (hi - lo) * float(np.dot(w, g))
    return total


def smoothed_phi(x, tau: float, c: float, nodes: int = 64, method: str = "closed_form"):
    """Expected influence E_N phi(x (1 + N) / tau) with N ~ N(0, c).

    method="closed_form" is exact and vectorized; method="quadrature" is the
    slower independent cross-check with the given node count. The two agree
    to well under 1e-9 across |x|/tau up to 1e3.
    """
    if not (math.isfinite(tau) and tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    if not (math.isfinite(c) and c >= 0):
        raise ValueError(f"c must be >= 0, got {c}")
    scalar = np.isscalar(x)
    a = np.asarray(x, dtype=float) / tau
    if not np.all(np.isfinite(a)):
        raise ValueError("x must be finite")
    if method == "closed_form":
        out = _closed_form_array(np.atleast_1d(a), c)
    elif method == "quadrature":
        out = np.array([_quadrature_scalar(v, c, nodes) for v in np.atleast_1d(a).ravel()])
        out = out.reshape(np.atleast_1d(a).shape)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(out[0]) if scalar else out.reshape(np.shape(a))


@njit(cache=True)
def _smoothed_scalar_nb(a: float, c: float) -> float:
    # scalar twin of _closed_form_array (same branch structure)
    sig = abs(a) * math.sqrt(c)
    if sig == 0.0:
        if a > SQRT2:
            return PHI_SAT
        if a < -SQRT2:
            return -PHI_SAT
        return a - a * a * a / 6.0
    al = (-SQRT2 - a) / sig
    be = (SQRT2 - a) / sig
    if al > _Z_CLAMP:
        al = _Z_CLAMP
    elif al < -_Z_CLAMP:
        al = -_Z_CLAMP
    if be > _Z_CLAMP:
        be = _Z_CLAMP
    elif be < -_Z_CLAMP:
        be = -_Z_CLAMP
    fa_cdf = 0.5 * math.erfc(-al / SQRT2)
    fb_cdf = 0.5 * math.erfc(-be / SQRT2)
    tails = PHI_SAT * (1.0 - fb_cdf) - PHI_SAT * fa_cdf
    if sig <= 1.0:
        fa = math.exp(-0.5 * al * al) * _INV_SQRT_2PI
        fb = math.exp(-0.5 * be * be) * _INV_SQRT_2PI
        m0 = fb_cdf - fa_cdf
        m1 = fa - fb
        m2 = m0 + al * fa - be * fb
        m3 = 2.0 * m1 + al * al * fa - be * be * fb
        ey = a * m0 + sig * m1
        ey3 = (a * a * a * m0 + 3.0 * a * a * sig * m1
               + 3.0 * a * sig * sig * m2 + sig * sig * sig * m3)
        return ey - ey3 / 6.0 + tails
    acc = 0.0
    for i in range(_WIN_Y.shape[0]):
        t = (_WIN_Y[i] - a) / sig
        acc += _WIN_G[i] * math.exp(-0.5 * t * t)
    return acc * _INV_SQRT_2PI / sig + tails


@njit(cache=True)
def _nsme_sums(x: np.ndarray, tau: float, c: float) -> np.ndarray:
    # serial fixed-order accumulation so reruns are bit-identical
    n, d = x.shape
    acc = np.zeros(d)
    for i in range(n):
        for j in range(d):
            acc[j] += _smoothed_scalar_nb(x[i, j] / tau, c)
    return acc


def nsme(dataset: Dataset, cfg: NsmeConfig) -> MeanEstimate:
    """Per coordinate, (tau / n) times the summed smoothed influence of the
    samples. Deterministic, and bounded by tau * 2 sqrt2 / 3 in every
    coordinate no matter the data."""
    sums = _nsme_sums(dataset.samples, cfg.tau, cfg.c)
    value = sums * (cfg.tau / dataset.n)
    return MeanEstimate(value=value, tau_used=cfg.tau, m_used=None,
                        budget_spent=None, noise_sigma=0.0)


def nsme_sensitivity(cfg: NsmeConfig, n: int, d: int) -> Sensitivity:
    """One swapped sample moves each influence term by at most 2 * 2 sqrt2/3,
    so the estimate moves by at most (4 sqrt2 / 3) tau sqrt(d) / n in l2."""
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ValueError(f"n must be a positive integer, got {n}")
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"d must be a positive integer, got {d}")
    per_coord = 2.0 * PHI_SAT * cfg.tau / n
    return Sensitivity(l1=d * per_coord, l2=math.sqrt(d) * per_coord)


def cdp_nsme(dataset: Dataset, cfg: NsmeConfig, rho: float, rng: RngStream,
             calibration: str = "exact") -> MeanEstimate:
    """Smoothed influence estimate plus Gaussian noise under rho-zCDP.

    calibration="exact" (default) derives the noise from the worst-case l2
    sensitivity: sigma^2 = (16/9) tau^2 d / (rho n^2). calibration="paper"
    keeps the looser stated constant sigma^2 = tau^2 d / (rho n^2); it is
    recorded on the estimate so downstream audits can tell them apart.
    """
    est = nsme(dataset, cfg)
    n, d = dataset.n, dataset.d
    if calibration == "exact":
        delta2 = nsme_sensitivity(cfg, n, d).l2
    elif calibration == "paper":
        delta2 = SQRT2 * cfg.tau * math.sqrt(d) / n
    else:
        raise ValueError(f"calibration must be 'paper' or 'exact', got {calibration!r}")
    noisy = gaussian_mechanism(est.value, delta2, rho, rng)
    return MeanEstimate(value=noisy, tau_used=cfg.tau, m_used=None,
                        budget_spent=ZCDP(rho), noise_sigma=delta2 / math.sqrt(2.0 * rho),
                        calibration=calibration)


def recommended_tau(mode: str, *, n: int, d: int, k: float = None, rho: float = None,
                    eps: float = None, M: float = None, q: float = None,
                    T: int = None) -> float:
    """Truncation scale matching the error-balancing schedules, floored at
    10 (with a warning) where the analysis needs tau at least that large.

    Modes: cdp_hdme, dp_hdme, sco_convex_hdme, sco_convex_nsme,
    sco_strongly_convex.
    """
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ValueError(f"n must be a positive integer, got {n}")
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"d must be a positive integer, got {d}")

    def need(name, value, positive=True):
        if value is None:
            raise ValueError(f"mode {mode!r} needs parameter {name}")
        if positive and not (math.isfinite(value) and value > 0):
            raise ValueError(f"{name} must be positive, got {value}")
        return float(value)

    if mode == "cdp_hdme":
        tau = (math.sqrt(need("rho", rho)) * n / math.sqrt(d)) ** (1.0 / need("k", k))
    elif mode == "dp_hdme":
        tau = (need("eps", eps) * n / d) ** (1.0 / need("k", k))
    elif mode == "sco_convex_hdme":
        tau = (math.sqrt(need("rho", rho)) * n / (need("M", M) * d**1.5)) ** (1.0 / need("k", k))
    elif mode == "sco_convex_nsme":
        qv = need("q", q)
        if not (0.5 <= qv <= 2.0):
            raise ValueError(f"q must lie in [0.5, 2], got {qv}")
        tau = (math.sqrt(need("rho", rho)) * n / (need("M", M) * d**qv)) ** 0.5
    elif mode == "sco_strongly_convex":
        Tv = need("T", T)
        tau = (math.sqrt(need("rho", rho)) * n / (math.sqrt(d) * Tv**1.5)) ** (1.0 / need("k", k))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if tau < TAU_FLOOR:
        warnings.warn(
            f"recommended tau {tau:.4g} below floor {TAU_FLOOR:g} for mode {mode}; using the floor",
            ScheduleWarning, stacklevel=2)
        return TAU_FLOOR
    return tau
