"""Differentially private synthetic text: DP metadata synthesis grounding private evolution."""

from .errors import (
    BackendError,
    BudgetExceededError,
    ConfigError,
    EvaluationError,
    InvalidArgumentError,
    MapleError,
    PipelineError,
    SchemaValidationError,
)
from .privacy import (
    PrivacyBudget,
    SpendLedger,
    calibrate_rho,
    compose,
    fits_within,
    even_splits,
    rho_of_gaussian,
    sigma_for_rho,
    split_budget,
    zcdp_to_approx_dp,
)
from .schema import MetadataRecord, MetadataSchema, MetadataTable, load_schema

__version__ = "0.1.0"

__all__ = [
    "BackendError", "BudgetExceededError", "ConfigError", "EvaluationError", "InvalidArgumentError",
    "MapleError", "MetadataRecord", "MetadataSchema", "MetadataTable", "PipelineError", "PrivacyBudget",
    "SchemaValidationError", "SpendLedger", "calibrate_rho", "compose", "even_splits", "fits_within", "load_schema",
    "rho_of_gaussian", "sigma_for_rho", "split_budget", "zcdp_to_approx_dp",
]
