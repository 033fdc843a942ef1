"""Non-parametric multi-state survival estimation with death transitions
split into excess and population parts against external mortality tables."""

__version__ = "0.1.0"

from .data import (
    DataValidationError,
    EventDataset,
    TransRecord,
    load_dataset,
    risk_set_size,
    write_dataset,
)
from .hazards import (
    CumHazEstimate,
    EstimationError,
    NegativeExcessWarning,
    estimate_all,
    greenwood_var,
    nelson_aalen,
    split_hazards,
)
from .inference import (
    BootstrapResult,
    ConfInterval,
    TargetEstimate,
    bootstrap,
    ci_log_boot,
    ci_plain_boot,
    ci_plain_greenwood,
    ci_quantile_boot,
)
from .model import (
    ModelError,
    TransitionModel,
    build_model,
    illness_death_model,
    model_from_json,
    model_to_json,
)
from .probtrans import (
    NegativeProbabilityWarning,
    ProbTransEstimate,
    aalen_johansen,
    greenwood_cov,
)
from .ratetable import (
    DAYS_PER_YEAR,
    Demographics,
    RateTable,
    RateTableError,
    cumulative_pop_hazard,
    demo_ratetable,
    individual_hazard,
    load_ratetable,
)

__all__ = [
    "DAYS_PER_YEAR",
    "BootstrapResult",
    "ConfInterval",
    "CumHazEstimate",
    "DataValidationError",
    "Demographics",
    "EstimationError",
    "EventDataset",
    "ModelError",
    "NegativeExcessWarning",
    "NegativeProbabilityWarning",
    "ProbTransEstimate",
    "RateTable",
    "RateTableError",
    "TargetEstimate",
    "TransRecord",
    "TransitionModel",
    "aalen_johansen",
    "bootstrap",
    "build_model",
    "ci_log_boot",
    "ci_plain_boot",
    "ci_plain_greenwood",
    "ci_quantile_boot",
    "cumulative_pop_hazard",
    "demo_ratetable",
    "estimate_all",
    "greenwood_cov",
    "greenwood_var",
    "illness_death_model",
    "individual_hazard",
    "load_dataset",
    "load_ratetable",
    "model_from_json",
    "model_to_json",
    "nelson_aalen",
    "risk_set_size",
    "split_hazards",
    "write_dataset",
]
