"""Differentially private stochastic convex optimization under
heavy-tailed data: private mean-estimation oracles, a projected-gradient
loop with budget accounting, matching instance generators, and
minimax lower-bound helpers."""

from .core import (
    ApproxDP,
    Dataset,
    MomentSpec,
    PrivacyBudget,
    PureDP,
    RngStream,
    ScheduleWarning,
    ZCDP,
)
from .privacy import (
    BudgetLedger,
    Sensitivity,
    cdp_to_approx_dp,
    compose,
    gaussian_mechanism,
    laplace_mechanism,
    pure_to_cdp,
    split_budget,
)
from .estimators import (
    HdmeConfig,
    MeanEstimate,
    NsmeConfig,
    catoni_phi,
    cdp_hdme,
    cdp_nsme,
    dp_hdme,
    hdme,
    hdme_sensitivity,
    nsme,
    nsme_sensitivity,
    recommended_tau,
    smoothed_phi,
)
from .sco import (
    ConstraintSet,
    LossOracle,
    SCOResult,
    Trajectory,
    cdp_sco_convex_hdme,
    cdp_sco_convex_nsme,
    cdp_sco_strongly_convex,
    excess_risk,
    project_ball,
    resolve_strongly_convex_T,
    scof,
)
from .instances import (
    FanoParams,
    HeavyTailDist,
    PackingDistribution,
    fano_bound,
    gv_code,
    make_loss,
    packing_distribution,
    regression_instance,
    student_t_coordwise,
    tv_and_kl,
)
from .cli import (
    ExperimentConfig,
    ResultRow,
    emit_csv,
    parse_csv,
    run_experiment,
    summarize,
)

__version__ = "0.1.0"

__all__ = [
    "ApproxDP",
    "BudgetLedger",
    "ConstraintSet",
    "Dataset",
    "ExperimentConfig",
    "FanoParams",
    "HdmeConfig",
    "HeavyTailDist",
    "LossOracle",
    "MeanEstimate",
    "MomentSpec",
    "NsmeConfig",
    "PackingDistribution",
    "PrivacyBudget",
    "PureDP",
    "ResultRow",
    "RngStream",
    "SCOResult",
    "ScheduleWarning",
    "Sensitivity",
    "Trajectory",
    "ZCDP",
    "catoni_phi",
    "cdp_hdme",
    "cdp_nsme",
    "cdp_sco_convex_hdme",
    "cdp_sco_convex_nsme",
    "cdp_sco_strongly_convex",
    "cdp_to_approx_dp",
    "compose",
    "dp_hdme",
    "emit_csv",
    "excess_risk",
    "fano_bound",
    "gaussian_mechanism",
    "gv_code",
    "hdme",
    "hdme_sensitivity",
    "laplace_mechanism",
    "make_loss",
    "nsme",
    "nsme_sensitivity",
    "packing_distribution",
    "parse_csv",
    "project_ball",
    "pure_to_cdp",
    "recommended_tau",
    "regression_instance",
    "resolve_strongly_convex_T",
    "run_experiment",
    "scof",
    "smoothed_phi",
    "split_budget",
    "student_t_coordwise",
    "summarize",
    "tv_and_kl",
]
