"""Configuration, checkpointed stage execution and sweeps."""

from .config import MODES, PipelineConfig, config_from_dict, load_config
from .ingest import IngestError, ingest_jsonl
from .run import STAGES, Backends, BudgetPlan, RunResult, build_backends, plan_budget, run_pipeline
from .sweep import AXES, SweepError, run_sweep

__all__ = [
    "AXES", "MODES", "STAGES", "Backends", "BudgetPlan", "IngestError", "PipelineConfig", "RunResult",
    "SweepError", "build_backends", "config_from_dict", "ingest_jsonl", "load_config", "plan_budget",
    "run_pipeline", "run_sweep",
]
