"""Identification of linear regression systems from quantized observations.

The library simulates systems observed through multi-threshold quantizing
sensors, runs the constant-weight (WQNP) and adaptive information-matched
(IBID) recursive estimators, evaluates the quantized-data Cramer-Rao lower
bound, and provides a reproducible Monte-Carlo harness with a CLI.
"""

from ._version import __version__
from .crlb import CrlbAccumulator, accumulate, bound, bound_recursive_check, rho
from .estimator import (
    EstimatorState,
    StepRecord,
    WeightSchedule,
    WeightValidationReport,
    convert,
    ibid_step,
    ibid_weights,
    initial_state,
    innovation,
    project,
    validate_wqnp_weights,
    wqnp_step,
)
from .harness import (
    AggregateMetrics,
    ConfigError,
    EfficiencyReport,
    ExperimentConfig,
    config_from_dict,
    default_checkpoints,
    efficiency_report,
    example1_config,
    load_config,
    rate_slope,
    run_experiment,
    scalar_binary_config,
)
from .model import (
    BoxDomain,
    GaussianNoise,
    QuantizerSpec,
    RegressorStream,
    TrueSystem,
    cell_probs,
    example1_regressors,
    quantize,
    step_system,
)
from .numerics import (
    DomainError,
    PositiveDefiniteError,
    gauss_cdf,
    gauss_pdf,
    rank_one_downdate,
    sym_invert,
)

__all__ = [
    "__version__",
    "AggregateMetrics",
    "BoxDomain",
    "ConfigError",
    "CrlbAccumulator",
    "DomainError",
    "EfficiencyReport",
    "EstimatorState",
    "ExperimentConfig",
    "GaussianNoise",
    "PositiveDefiniteError",
    "QuantizerSpec",
    "RegressorStream",
    "StepRecord",
    "TrueSystem",
    "WeightSchedule",
    "WeightValidationReport",
    "accumulate",
    "bound",
    "bound_recursive_check",
    "cell_probs",
    "config_from_dict",
    "convert",
    "default_checkpoints",
    "efficiency_report",
    "example1_config",
    "example1_regressors",
    "gauss_cdf",
    "gauss_pdf",
    "ibid_step",
    "ibid_weights",
    "initial_state",
    "innovation",
    "load_config",
    "project",
    "quantize",
    "rank_one_downdate",
    "rate_slope",
    "rho",
    "run_experiment",
    "scalar_binary_config",
    "step_system",
    "sym_invert",
    "validate_wqnp_weights",
    "wqnp_step",
]
