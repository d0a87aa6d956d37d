"""Experiment harness: grid sweeps, Monte Carlo trials, and audited CSV or
JSON result emission for the private estimators and optimizers.

Determinism contract: a sweep is a pure function of its config. Per-trial
randomness derives from (master seed, grid-point values, trial index), so
adding grid points never perturbs existing trials and any worker count
produces the identical output file. Schedule warnings (tau floored, step
count clamped) depend only on the grid point; they are captured once per
point in a serial pass and attached to every trial row, which keeps the
worker pool free of global warning state.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
import warnings as _warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import RngStream, ZCDP
from .estimators import (
    HdmeConfig,
    NsmeConfig,
    cdp_hdme,
    cdp_nsme,
    dp_hdme,
    recommended_tau,
)
from .instances import (
    FanoParams,
    fano_bound,
    gv_code,
    make_loss,
    packing_distribution,
    regression_instance,
    student_t_coordwise,
)
from .sco import (
    ConstraintSet,
    cdp_sco_convex_hdme,
    cdp_sco_convex_nsme,
    cdp_sco_strongly_convex,
    project_ball,
)

COLUMNS = ["task", "algorithm", "n", "d", "k", "rho_or_eps", "tau", "T",
           "eta", "q", "trial", "seed", "metric_name", "metric_value",
           "stderr", "budget_spent", "runtime_ms", "warnings"]

SUMMARY_COLUMNS = ["task", "algorithm", "d", "k", "rho_or_eps", "q",
                   "metric_name", "n", "count", "median", "mean", "stderr",
                   "slope", "slope_ci95"]

MEAN_EST_ALGORITHMS = ("cdp_hdme", "dp_hdme", "cdp_nsme")
SCO_ALGORITHMS = ("cdp_sco_convex_hdme", "cdp_sco_convex_nsme",
                  "cdp_sco_strongly_convex")
LOWER_BOUND_ALGORITHM = "fano_packing"
LOSSES = ("quadratic", "linear", "linear_regression")

_METRIC_BY_TASK = {"mean-est": "l2_error", "sco": "excess_risk",
                   "lower-bound": "fano_bound"}

_INT_COLS = {"n", "d", "T", "trial", "seed"}
_FLOAT_COLS = {"k", "rho_or_eps", "tau", "eta", "q", "metric_value",
               "stderr", "budget_spent", "runtime_ms"}
_OPTIONAL_COLS = {"tau", "T", "eta", "q", "metric_value", "stderr",
                  "budget_spent", "runtime_ms"}


class ConfigError(ValueError):
    """Invalid experiment configuration, reported before any computation."""


@dataclass(frozen=True)
class ResultRow:
    task: str
    algorithm: str
    n: int
    d: int
    k: float
    rho_or_eps: float
    tau: Optional[float]
    T: Optional[int]
    eta: Optional[float]
    q: Optional[float]
    trial: int
    seed: int
    metric_name: str
    metric_value: Optional[float]
    stderr: Optional[float]
    budget_spent: Optional[float]
    runtime_ms: Optional[float]
    warnings: str


@dataclass
class ExperimentConfig:
    task: str
    algorithm: str = ""
    distribution: str = ""
    loss: str = ""
    n: Sequence[int] = ()
    d: Sequence[int] = ()
    k: Sequence[float] = ()
    rho: Sequence[float] = ()
    eps: Sequence[float] = ()
    q: Sequence[float] = ()
    trials: int = 1
    seed: int = 0
    out: Optional[str] = None
    calibration: str = "exact"
    format: str = "csv"
    workers: int = 1
    radius: float = 1.0
    mean_bound: float = 10.0
    mu: float = 0.0
    beta: float = 0.1
    c: float = 1.0
    timing: bool = False


@dataclass(frozen=True)
class GridPoint:
    n: int
    d: int
    k: float
    budget: float
    q: Optional[float]


# ---------------------------------------------------------------------------
# config handling


def _parse_dist_id(dist_id: str) -> Tuple[str, Dict[str, float]]:
    name, _, rest = dist_id.partition(":")
    params: Dict[str, float] = {}
    if rest:
        for part in rest.split(","):
            key, sep, val = part.partition("=")
            if not sep:
                raise ConfigError(f"malformed distribution id {dist_id!r}")
            try:
                params[key.strip()] = float(val)
            except ValueError:
                raise ConfigError(f"malformed distribution id {dist_id!r}")
    return name.strip(), params


def validate_config(cfg: ExperimentConfig) -> None:
    errs: List[str] = []

    def bad(msg: str) -> None:
        errs.append(msg)

    if cfg.task not in _METRIC_BY_TASK:
        raise ConfigError(f"unknown task {cfg.task!r}")

    if not isinstance(cfg.trials, int) or cfg.trials < 1:
        bad(f"trials must be a positive integer, got {cfg.trials!r}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        bad(f"seed must be a nonnegative integer, got {cfg.seed!r}")
    if cfg.calibration not in ("paper", "exact"):
        bad(f"calibration must be 'paper' or 'exact', got {cfg.calibration!r}")
    if cfg.format not in ("csv", "json"):
        bad(f"format must be 'csv' or 'json', got {cfg.format!r}")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        bad(f"workers must be a positive integer, got {cfg.workers!r}")
    if not (math.isfinite(cfg.radius) and cfg.radius > 0):
        bad(f"radius must be positive, got {cfg.radius!r}")
    if not (math.isfinite(cfg.mean_bound) and cfg.mean_bound > 0):
        bad(f"mean_bound must be positive, got {cfg.mean_bound!r}")
    if not (0.0 < cfg.beta < 1.0):
        bad(f"beta must lie in (0, 1), got {cfg.beta!r}")
    if not (math.isfinite(cfg.c) and cfg.c >= 0):
        bad(f"c must be >= 0, got {cfg.c!r}")
    if not math.isfinite(cfg.mu):
        bad(f"mu must be finite, got {cfg.mu!r}")

    for name, grid, kind in (("n", cfg.n, int), ("d", cfg.d, int)):
        if not grid:
            bad(f"grid {name} must be nonempty")
        elif not all(isinstance(v, int) and v >= 1 for v in grid):
            bad(f"grid {name} must contain positive integers, got {list(grid)}")
    if not cfg.k:
        bad("grid k must be nonempty")
    elif not all(math.isfinite(v) and v >= 2 for v in cfg.k):
        bad(f"grid k must contain values >= 2, got {list(cfg.k)}")

    needs_eps = cfg.algorithm == "dp_hdme"
    if needs_eps:
        if not cfg.eps:
            bad("dp_hdme needs an eps grid")
        if cfg.rho:
            bad("dp_hdme takes eps, not rho")
    else:
        if not cfg.rho:
            bad(f"task {cfg.task} with algorithm {cfg.algorithm!r} needs a rho grid")
        if cfg.eps:
            bad(f"algorithm {cfg.algorithm!r} takes rho, not eps")
    for name, grid in (("rho", cfg.rho), ("eps", cfg.eps)):
        if grid and not all(math.isfinite(v) and v > 0 for v in grid):
            bad(f"grid {name} must contain positive values, got {list(grid)}")

    if cfg.algorithm == "cdp_sco_convex_nsme":
        if not cfg.q:
            bad("cdp_sco_convex_nsme needs a q grid")
        elif not all(0.5 <= v <= 2.0 for v in cfg.q):
            bad(f"grid q must lie in [0.5, 2], got {list(cfg.q)}")
    elif cfg.q:
        bad(f"q only applies to cdp_sco_convex_nsme, got grid {list(cfg.q)}")

    dist_name, dist_params = "", {}
    try:
        dist_name, dist_params = _parse_dist_id(cfg.distribution)
    except ConfigError as exc:
        bad(str(exc))

    if cfg.task == "mean-est":
        if cfg.algorithm not in MEAN_EST_ALGORITHMS:
            bad(f"mean-est algorithm must be one of {MEAN_EST_ALGORITHMS}, "
                f"got {cfg.algorithm!r}")
        if dist_name not in ("student_t", "packing"):
            bad(f"mean-est supports student_t or packing data, got {dist_name!r}")
        if cfg.loss:
            bad("loss does not apply to mean-est")
        if cfg.algorithm in ("cdp_hdme", "dp_hdme") and cfg.n and cfg.d:
            for d in cfg.d:
                m = math.ceil(4.0 * math.log(2.0 * d / cfg.beta))
                short = [n for n in cfg.n if n < m]
                if short:
                    bad(f"hdme at d={d}, beta={cfg.beta} needs n >= {m} "
                        f"batches source samples; too small: {short}")
    elif cfg.task == "sco":
        if cfg.algorithm not in SCO_ALGORITHMS:
            bad(f"sco algorithm must be one of {SCO_ALGORITHMS}, "
                f"got {cfg.algorithm!r}")
        if cfg.loss not in LOSSES:
            bad(f"sco loss must be one of {LOSSES}, got {cfg.loss!r}")
        if dist_name not in ("student_t", "packing", "regression"):
            bad(f"sco supports student_t, packing, or regression data, "
                f"got {dist_name!r}")
        if (dist_name == "regression") != (cfg.loss == "linear_regression"):
            bad("regression data pairs with the linear_regression loss only")
        if cfg.algorithm == "cdp_sco_convex_nsme" and cfg.loss == "linear_regression":
            bad("linear_regression gradients are unbounded per sample; use an "
                "hdme driver")
        if cfg.algorithm == "cdp_sco_strongly_convex" and cfg.loss != "quadratic":
            bad("the strongly convex driver needs a strongly convex loss "
                "(quadratic)")
    else:  # lower-bound
        if cfg.algorithm not in ("", LOWER_BOUND_ALGORITHM):
            bad(f"lower-bound algorithm is {LOWER_BOUND_ALGORITHM!r}, "
                f"got {cfg.algorithm!r}")
        if dist_name != "packing":
            bad(f"lower-bound uses packing data, got {dist_name!r}")
        if cfg.loss:
            bad("loss does not apply to lower-bound")
        for d in cfg.d:
            if isinstance(d, int) and (d < 8 or d % 2):
                bad(f"lower-bound needs even d >= 8, got {d}")

    if dist_name == "packing":
        p = dist_params.get("p")
        if p is None or not (0.0 < p <= 1.0):
            bad(f"packing distribution needs p in (0, 1], got {dist_params}")
        if set(dist_params) - {"p"}:
            bad(f"unknown packing parameters {sorted(set(dist_params) - {'p'})}")
        for d in cfg.d:
            if isinstance(d, int) and d % 2:
                bad(f"packing data needs even d, got {d}")
    elif dist_name in ("student_t", "regression"):
        if set(dist_params) - {"k"}:
            bad(f"unknown {dist_name} parameters "
                f"{sorted(set(dist_params) - {'k'})}")

    pinned_k = dist_params.get("k")
    if pinned_k is not None and cfg.k:
        if set(cfg.k) != {pinned_k}:
            bad(f"distribution id pins k={pinned_k} but grid k is {list(cfg.k)}")

    if errs:
        raise ConfigError("; ".join(errs))


def _resolve_pinned_k(cfg: ExperimentConfig) -> ExperimentConfig:
    # a k embedded in the distribution id stands in for an absent k grid;
    # the lower-bound algorithm name is fixed, so normalize it for seeding
    if cfg.task == "lower-bound" and not cfg.algorithm:
        cfg.algorithm = LOWER_BOUND_ALGORITHM
    try:
        _, params = _parse_dist_id(cfg.distribution)
    except ConfigError:
        return cfg
    if "k" in params and not cfg.k:
        cfg.k = (params["k"],)
    return cfg


def _grid_points(cfg: ExperimentConfig) -> List[GridPoint]:
    budgets = cfg.eps if cfg.algorithm == "dp_hdme" else cfg.rho
    qs: Sequence[Optional[float]] = cfg.q if cfg.q else (None,)
    pts = []
    for n in sorted(set(cfg.n)):
        for d in sorted(set(cfg.d)):
            for k in sorted(set(cfg.k)):
                for b in sorted(set(budgets)):
                    for q in sorted(set(qs), key=lambda v: -1.0 if v is None else v):
                        pts.append(GridPoint(int(n), int(d), float(k),
                                             float(b), q))
    return pts


# ---------------------------------------------------------------------------
# trial execution


def _trial_stream(cfg: ExperimentConfig, pt: GridPoint, trial: int) -> RngStream:
    qlab = -1.0 if pt.q is None else float(pt.q)
    return RngStream(cfg.seed).child(
        cfg.task, cfg.algorithm, cfg.distribution, cfg.loss,
        "n", pt.n, "d", pt.d, "k", pt.k, "budget", pt.budget,
        "q", qlab, "trial", trial)


def _canonical_nu(d: int) -> np.ndarray:
    nu = np.zeros(d, dtype=np.int8)
    nu[: d // 2] = 1
    return nu


def _regression_w_star(cfg: ExperimentConfig, d: int) -> np.ndarray:
    signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    return 0.5 * cfg.radius * signs / math.sqrt(d)


def _make_distribution(cfg: ExperimentConfig, k: float, d: int):
    name, params = _parse_dist_id(cfg.distribution)
    if name == "student_t":
        return student_t_coordwise(k, d, mu=np.full(d, cfg.mu))
    if name == "packing":
        return packing_distribution(_canonical_nu(d), params["p"], k)
    return regression_instance(k, d, _regression_w_star(cfg, d))


def _budget_value(budget) -> float:
    return budget.rho if isinstance(budget, ZCDP) else budget.eps


def _mean_est_parts(cfg: ExperimentConfig, pt: GridPoint,
                    stream: RngStream) -> Dict[str, Optional[float]]:
    dist = _make_distribution(cfg, pt.k, pt.d)
    data = dist.sample(pt.n, stream.child("data"))
    if cfg.algorithm == "cdp_hdme":
        tau = recommended_tau("cdp_hdme", n=pt.n, d=pt.d, k=pt.k, rho=pt.budget)
        est = cdp_hdme(data, HdmeConfig.from_beta(tau, cfg.beta, pt.d),
                       pt.budget, stream.child("est"))
    elif cfg.algorithm == "dp_hdme":
        tau = recommended_tau("dp_hdme", n=pt.n, d=pt.d, k=pt.k, eps=pt.budget)
        est = dp_hdme(data, HdmeConfig.from_beta(tau, cfg.beta, pt.d),
                      pt.budget, stream.child("est"))
    else:  # cdp_nsme shares the zCDP tau schedule
        tau = recommended_tau("cdp_hdme", n=pt.n, d=pt.d, k=pt.k, rho=pt.budget)
        est = cdp_nsme(data, NsmeConfig(tau, c=cfg.c), pt.budget,
                       stream.child("est"), calibration=cfg.calibration)
    mean = np.asarray(dist.mean, dtype=float)
    err = float(np.linalg.norm(est.value - mean))
    return {"tau": est.tau_used, "T": None, "eta": None, "q": None,
            "metric_value": err, "budget_spent": _budget_value(est.budget_spent)}


def _population_excess(cfg: ExperimentConfig, pt: GridPoint, dist,
                       cset: ConstraintSet, w: np.ndarray) -> float:
    if cfg.loss == "quadratic":
        mu = np.asarray(dist.mean, dtype=float)
        w_star = project_ball(mu, cset)
        return 0.5 * float(np.sum((w - mu) ** 2) - np.sum((w_star - mu) ** 2))
    if cfg.loss == "linear":
        mu = np.asarray(dist.mean, dtype=float)
        nrm = float(np.linalg.norm(mu))
        w_star = cset.center + cset.radius * mu / nrm if nrm > 0 else cset.center
        return float(np.dot(w_star - w, mu))
    # linear_regression: covariates uniform on [-1,1] have second moment I/3
    w_star = _regression_w_star(cfg, pt.d)
    return float(np.sum((w - w_star) ** 2)) / 6.0


def _sco_parts(cfg: ExperimentConfig, pt: GridPoint,
               stream: RngStream) -> Dict[str, Optional[float]]:
    cset = ConstraintSet(center=np.zeros(pt.d), radius=cfg.radius)
    dist = _make_distribution(cfg, pt.k, pt.d)
    loss = make_loss(cfg.loss, cset, k=pt.k, mean_bound=cfg.mean_bound)
    data = dist.sample(pt.n, stream.child("data"))
    opt_rng = stream.child("opt")
    if cfg.algorithm == "cdp_sco_convex_hdme":
        res = cdp_sco_convex_hdme(data, loss, pt.budget, opt_rng,
                                  beta=cfg.beta, constraint=cset)
    elif cfg.algorithm == "cdp_sco_convex_nsme":
        res = cdp_sco_convex_nsme(data, loss, pt.budget, pt.q, opt_rng,
                                  c=cfg.c, calibration=cfg.calibration,
                                  constraint=cset)
    else:
        res = cdp_sco_strongly_convex(data, loss, pt.budget, opt_rng,
                                      beta=cfg.beta, constraint=cset)
    val = _population_excess(cfg, pt, dist, cset, res.w_priv)
    return {"tau": res.tau, "T": res.T, "eta": res.eta, "q": res.q,
            "metric_value": val,
            "budget_spent": _budget_value(res.ledger.total())}


def _lower_bound_parts(cfg: ExperimentConfig, pt: GridPoint,
                       stream: RngStream) -> Dict[str, Optional[float]]:
    _, params = _parse_dist_id(cfg.distribution)
    p = params["p"]
    code = gv_code(pt.d)
    means = np.stack([packing_distribution(row, p, pt.k).mean for row in code])
    diffs = means[:, None, :] - means[None, :, :]
    dist2 = np.sum(diffs * diffs, axis=2)
    r = math.sqrt(float(np.min(dist2[np.triu_indices(len(code), k=1)])))
    val = fano_bound(FanoParams(r=r, M_count=len(code), alpha=p,
                                beta_kl=math.inf, rho=pt.budget, n=pt.n))
    return {"tau": None, "T": None, "eta": None, "q": None,
            "metric_value": val, "budget_spent": None}


_PARTS_BY_TASK: Dict[str, Callable] = {
    "mean-est": _mean_est_parts,
    "sco": _sco_parts,
    "lower-bound": _lower_bound_parts,
}


def _execute_trial(cfg: ExperimentConfig, pt: GridPoint, trial: int,
                   capture: bool):
    """Run one trial; returns (parts, error text, captured warning texts)."""
    stream = _trial_stream(cfg, pt, trial)
    run = _PARTS_BY_TASK[cfg.task]
    err = None
    caught: Optional[List[str]] = None
    t0 = time.perf_counter()
    if capture:
        with _warnings.catch_warnings(record=True) as wlist:
            _warnings.simplefilter("always")
            try:
                parts = run(cfg, pt, stream)
            except Exception as exc:  # recorded, sweep continues
                parts, err = {}, f"{type(exc).__name__}: {exc}"
        caught = [str(w.message) for w in wlist]
    else:
        try:
            parts = run(cfg, pt, stream)
        except Exception as exc:
            parts, err = {}, f"{type(exc).__name__}: {exc}"
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    return parts, err, caught, stream.derived_seed(), elapsed_ms


def _build_row(cfg: ExperimentConfig, pt: GridPoint, trial: int, parts: Dict,
               err: Optional[str], warn_texts: List[str], seed: int,
               elapsed_ms: float) -> ResultRow:
    notes = list(warn_texts)
    spent = parts.get("budget_spent")
    if spent is not None and abs(spent - pt.budget) > math.ulp(pt.budget):
        notes.append(f"budget audit: spent {spent!r} != configured {pt.budget!r}")
    if err is not None:
        notes.append(f"error: {err}")
    val = parts.get("metric_value")
    if val is not None and not math.isfinite(val):
        notes.append(f"nonfinite metric {val!r} dropped")
        val = None
    return ResultRow(
        task=cfg.task, algorithm=cfg.algorithm or LOWER_BOUND_ALGORITHM,
        n=pt.n, d=pt.d, k=pt.k, rho_or_eps=pt.budget,
        tau=parts.get("tau"), T=parts.get("T"), eta=parts.get("eta"),
        q=parts.get("q"), trial=trial, seed=seed,
        metric_name=_METRIC_BY_TASK[cfg.task], metric_value=val,
        stderr=None, budget_spent=spent,
        runtime_ms=elapsed_ms if cfg.timing else None,
        warnings=" | ".join(notes))


def run_experiment(cfg: ExperimentConfig) -> List[ResultRow]:
    """Run every (grid point x trial) and return rows in canonical order."""
    cfg = _resolve_pinned_k(cfg)
    validate_config(cfg)
    pts = _grid_points(cfg)
    rows: List[Optional[ResultRow]] = [None] * (len(pts) * cfg.trials)
    point_warnings: List[List[str]] = []

    # serial representative pass pins each point's schedule warnings
    for i, pt in enumerate(pts):
        parts, err, caught, seed, ms = _execute_trial(cfg, pt, 0, capture=True)
        point_warnings.append(caught or [])
        rows[i * cfg.trials] = _build_row(cfg, pt, 0, parts, err,
                                          point_warnings[i], seed, ms)

    jobs = [(i, t) for i in range(len(pts)) for t in range(1, cfg.trials)]

    def run_one(job: Tuple[int, int]) -> ResultRow:
        i, t = job
        parts, err, _, seed, ms = _execute_trial(cfg, pts[i], t, capture=False)
        return _build_row(cfg, pts[i], t, parts, err, point_warnings[i],
                          seed, ms)

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        if cfg.workers > 1 and jobs:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(run_one, jobs))
        else:
            results = [run_one(job) for job in jobs]
    for (i, t), row in zip(jobs, results):
        rows[i * cfg.trials + t] = row
    return rows  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# serialization


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_cell(getattr(row, col)) for col in COLUMNS])
    return buf.getvalue()


def _parse_cell(col: str, cell: str):
    if cell == "" and col in _OPTIONAL_COLS:
        return None
    if col in _INT_COLS:
        return int(cell)
    if col in _FLOAT_COLS:
        return float(cell)
    return cell


def parse_csv(text: str) -> List[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != COLUMNS:
        raise ValueError(f"unexpected header {header!r}")
    return [ResultRow(**{col: _parse_cell(col, cell)
                         for col, cell in zip(COLUMNS, line)})
            for line in reader if line]


def emit_jsonl(rows: Sequence[ResultRow]) -> str:
    return "".join(
        json.dumps({col: getattr(row, col) for col in COLUMNS},
                   ensure_ascii=False) + "\n"
        for row in rows)


def parse_jsonl(text: str) -> List[ResultRow]:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        obj = {col: obj[col] for col in COLUMNS}
        for col in _FLOAT_COLS:
            if obj[col] is not None:
                obj[col] = float(obj[col])
        rows.append(ResultRow(**obj))
    return rows


def parse_rows(text: str) -> List[ResultRow]:
    head = text.lstrip()[:1]
    return parse_jsonl(text) if head == "{" else parse_csv(text)


def _write_output(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# summaries


def _ols_slope(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    resid = y - (ybar + slope * (x - xbar))
    dof = len(x) - 2
    se = math.sqrt(float(np.sum(resid**2)) / dof / sxx) if dof > 0 else 0.0
    return slope, 1.96 * se


def summarize(rows: Sequence[ResultRow]) -> List[Dict]:
    """Per grid point: count, median, mean, stderr of the metric; plus a
    log-log slope of the median vs n fitted within each group sharing all
    other coordinates (absent when fewer than two usable n values)."""
    if not rows:
        raise ValueError("no rows to summarize")
    groups: Dict[Tuple, Dict[int, List[float]]] = {}
    for row in rows:
        if row.metric_value is None:
            continue
        key = (row.task, row.algorithm, row.d, row.k, row.rho_or_eps,
               row.q, row.metric_name)
        groups.setdefault(key, {}).setdefault(row.n, []).append(row.metric_value)
    if not groups:
        raise ValueError("no successful trials to summarize")

    out: List[Dict] = []
    sort_key = lambda key: tuple(-math.inf if v is None else v for v in key)
    for key in sorted(groups, key=sort_key):
        task, algorithm, d, k, budget, q, metric_name = key
        per_n = groups[key]
        ns = sorted(per_n)
        medians = {n: float(np.median(per_n[n])) for n in ns}
        slope = ci = None
        usable = [n for n in ns if medians[n] > 0]
        if len(usable) >= 2:
            slope, ci = _ols_slope(np.log(np.asarray(usable, dtype=float)),
                                   np.log([medians[n] for n in usable]))
        for n in ns:
            vals = np.asarray(per_n[n], dtype=float)
            stderr = (float(vals.std(ddof=1) / math.sqrt(len(vals)))
                      if len(vals) > 1 else 0.0)
            out.append({"task": task, "algorithm": algorithm, "d": d, "k": k,
                        "rho_or_eps": budget, "q": q,
                        "metric_name": metric_name, "n": n,
                        "count": len(vals), "median": medians[n],
                        "mean": float(vals.mean()), "stderr": stderr,
                        "slope": slope, "slope_ci95": ci})
    return out


def emit_summary_csv(summary: Sequence[Dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for entry in summary:
        writer.writerow([_cell(entry[col]) for col in SUMMARY_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# command line


_GRID_FLAG_TYPES = {"n": int, "d": int, "k": float, "rho": float,
                    "eps": float, "q": float}
_SCALAR_KEYS = {"trials": int, "seed": int, "workers": int,
                "radius": float, "mean_bound": float, "mu": float,
                "beta": float, "c": float}
_STR_KEYS = ("algorithm", "distribution", "loss", "calibration", "format",
             "out")


def _listify(name: str, value, caster) -> Tuple:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = [value]
    out = []
    for item in items:
        for part in str(item).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                out.append(caster(part))
            except ValueError:
                raise ConfigError(f"grid {name}: cannot parse {part!r}")
    return tuple(out)


_CONFIG_KEYS = ({"task", "timing"} | set(_GRID_FLAG_TYPES)
                | set(_SCALAR_KEYS) | set(_STR_KEYS))


def config_from_mapping(data: Dict, task: Optional[str] = None) -> ExperimentConfig:
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    chosen_task = task or data.get("task")
    if not chosen_task:
        raise ConfigError("config needs a task")
    if task and "task" in data and data["task"] != task:
        raise ConfigError(f"config task {data['task']!r} conflicts with "
                          f"subcommand {task!r}")
    cfg = ExperimentConfig(task=chosen_task)
    for key, caster in _GRID_FLAG_TYPES.items():
        if key in data:
            setattr(cfg, key, _listify(key, data[key], caster))
    for key, caster in _SCALAR_KEYS.items():
        if key in data:
            try:
                setattr(cfg, key, caster(data[key]))
            except (TypeError, ValueError):
                raise ConfigError(f"config {key}: cannot parse {data[key]!r}")
    for key in _STR_KEYS:
        if key in data and data[key] is not None:
            setattr(cfg, key, str(data[key]))
    if "timing" in data:
        cfg.timing = bool(data["timing"])
    return cfg


def _load_config_file(path: str) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _merge_flags(data: Dict, args: argparse.Namespace) -> Dict:
    merged = dict(data)
    for key in _GRID_FLAG_TYPES:
        value = getattr(args, key, None)
        if value:
            merged[key] = value
    for key in list(_SCALAR_KEYS) + list(_STR_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "timing", False):
        merged["timing"] = True
    return merged


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    for key in _GRID_FLAG_TYPES:
        parser.add_argument(f"--{key}", action="append",
                            help=f"{key} grid value(s), comma separable")
    parser.add_argument("--trials", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--algorithm")
    parser.add_argument("--distribution")
    parser.add_argument("--loss")
    parser.add_argument("--calibration", choices=["paper", "exact"])
    parser.add_argument("--out")
    parser.add_argument("--format", choices=["csv", "json"])
    parser.add_argument("--radius", type=float)
    parser.add_argument("--mean-bound", dest="mean_bound", type=float)
    parser.add_argument("--mu", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--c", type=float)
    parser.add_argument("--timing", action="store_true",
                        help="record wall-clock runtime_ms (breaks rerun "
                             "bit-identity)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htsco",
        description="Private heavy-tailed estimation and optimization "
                    "experiments")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for task in ("mean-est", "sco", "lower-bound"):
        p = sub.add_parser(task, help=f"run a {task} experiment")
        _add_experiment_flags(p)
    p = sub.add_parser("sweep", help="run experiments from a config file")
    p.add_argument("config", help="JSON config: one experiment object or "
                                  "{'experiments': [...]}")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--workers", type=int)
    p.add_argument("--timing", action="store_true")
    p = sub.add_parser("summarize", help="aggregate a results file")
    p.add_argument("input", help="CSV or JSON-lines results file")
    p.add_argument("--out")
    return parser


def _emit_rows(rows: Sequence[ResultRow], fmt: str, out: Optional[str]) -> None:
    text = emit_csv(rows) if fmt == "csv" else emit_jsonl(rows)
    _write_output(text, out)


def _cmd_experiment(task: str, args: argparse.Namespace) -> int:
    data = _load_config_file(args.config) if args.config else {}
    cfg = config_from_mapping(_merge_flags(data, args), task=task)
    rows = run_experiment(cfg)
    _emit_rows(rows, cfg.format, cfg.out)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    data = _load_config_file(args.config)
    blocks = data.get("experiments", [data]) if isinstance(data, dict) else data
    if not isinstance(blocks, list) or not blocks:
        raise ConfigError("sweep config needs at least one experiment")
    configs = []
    for block in blocks:
        if not isinstance(block, dict):
            raise ConfigError("each experiment must be a JSON object")
        merged = dict(block)
        if args.workers is not None:
            merged["workers"] = args.workers
        if args.timing:
            merged["timing"] = True
        cfg = config_from_mapping(merged)
        cfg = _resolve_pinned_k(cfg)
        validate_config(cfg)   # all configs vetted before any run
        configs.append(cfg)
    rows: List[ResultRow] = []
    for cfg in configs:
        rows.extend(run_experiment(cfg))
    fmt = args.format or configs[0].format
    out = args.out if args.out is not None else configs[0].out
    _emit_rows(rows, fmt, out)
    return 0


def _cmd_summarize(args: argparse.Namespace) -> int:
    try:
        with open(args.input, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}")
    try:
        rows = parse_rows(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot parse {args.input}: {exc}")
    if not rows:
        raise ConfigError(f"{args.input} holds no result rows")
    _write_output(emit_summary_csv(summarize(rows)), args.out)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "summarize":
            return _cmd_summarize(args)
        if args.cmd == "sweep":
            return _cmd_sweep(args)
        return _cmd_experiment(args.cmd, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failure exit contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
