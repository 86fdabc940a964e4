"""Variance-based sensitivity analysis for weighting estimators of the ATT."""

from .benchmark import BenchmarkRow, benchmark_covariate, benchmark_table, mri
from .dataset import ControlView, DataError, Dataset, control_view, load_csv
from .estimator import AttEstimate, SampleBoundsDiagnostic, estimate_att, sample_bounds
from .inference import (
    BootstrapConfig,
    SensitivityReport,
    bootstrap_ci,
    draw_replicates,
    find_lambda_star,
    find_r2_star,
    sweep_report,
)
from .msm import LambdaParam, MsmSolution, benchmark_lambda, msm_extrema, width_threshold
from .vbm import (
    BiasBound,
    CorrelationBoundSpec,
    R2Param,
    adjusted_estimate_range,
    optimal_bias_bound,
    r2_from_weight_pair,
    weighted_l2_identity_check,
)
from .weights import (
    FitConfig,
    WeightSet,
    fit_entropy_balancing,
    fit_logistic_ipw,
    leave_one_out_weights,
)

__version__ = "0.1.0"
