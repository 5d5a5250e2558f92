"""DP synthesizer for categorical metadata: an AIM-style select/measure/estimate loop."""

from .estimation import Measurement
from .graphical import JunctionTree, LogLinearModel
from .mechanism import (
    AimParams,
    Workload,
    clique_qualities,
    default_workload,
    estimate,
    load_model,
    measure_marginal,
    run_aim,
    sample_synthetic,
    save_model,
    select_clique,
    selection_probabilities,
)

__all__ = [
    "AimParams", "JunctionTree", "LogLinearModel", "Measurement", "Workload", "clique_qualities",
    "default_workload", "estimate", "load_model", "measure_marginal", "run_aim", "sample_synthetic",
    "save_model", "select_clique", "selection_probabilities",
]
