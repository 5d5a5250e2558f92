"""One-axis experiment sweeps over epsilon, iteration count, mode or schema subset."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence

from ..errors import ConfigError, MapleError
from .config import PE_MODES, SPLIT_MODES, ZERO_SHOT_OF, PipelineConfig
from .run import Backends, read_metrics_csv, run_pipeline, write_metrics_csv

log = logging.getLogger(__name__)

AXES = ("epsilon", "iterations", "mode", "schema_subset")
# PE mode to return to when an iteration sweep moves from T=0 back to T>0
_PE_OF = {"zero_shot": "augpe", "zero_shot_me": "maple"}


class SweepError(MapleError):
    def __init__(self, message: str, completed: list[str], csv_path: Path):
        super().__init__(message)
        self.completed = completed
        self.csv_path = csv_path


def member_config(base: PipelineConfig, axis: str, value, run_dir: Path) -> PipelineConfig:
    """The base config with one axis set to ``value``, writing into ``run_dir``."""
    changes: dict = {"output_dir": str(run_dir), "run_id": f"{base.run_id or 'sweep'}-{axis}={format_value(value)}"}
    if axis == "epsilon":
        changes["epsilon"] = "inf" if math.isinf(float(value)) else float(value)
    elif axis == "iterations":
        T = int(value)
        mode = base.mode
        if T == 0:
            if mode not in ZERO_SHOT_OF:
                raise ConfigError(f"mode {mode!r} has no zero-shot counterpart for T=0")
            mode = ZERO_SHOT_OF[mode]
        else:
            mode = _PE_OF.get(mode, mode)
        changes["mode"] = mode
        changes["pe.iterations"] = T
        if mode not in SPLIT_MODES:
            changes["split"] = None
    elif axis == "mode":
        changes["mode"] = value
        if value not in SPLIT_MODES:
            changes["split"] = None
        if value in PE_MODES and base.pe.iterations == 0:
            raise ConfigError(f"mode {value!r} needs pe.iterations > 0 in the base config")
    elif axis == "schema_subset":
        changes["data.schema_subset"] = None if value in (None, "full") else list(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    return base.replace(**changes)


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return "+".join(map(str, value))
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


def run_sweep(base: PipelineConfig, axis: str, values: Sequence, out_root: str | Path | None = None,
              backends: Backends | None = None) -> Path:
    """Run one pipeline per value and merge their metrics into ``sweep_metrics.csv``.

    Members share the base seed. If a member fails, the CSV keeps the completed
    members and a :class:`SweepError` is raised.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    if not values:
        raise ConfigError("a sweep needs at least one axis value")
    root = Path(out_root or base.output_dir)
    if not root.is_absolute() and base.base_dir and out_root is None:
        root = Path(base.base_dir) / root
    root.mkdir(parents=True, exist_ok=True)
    configs = [member_config(base, axis, v, root / f"{axis}={format_value(v)}") for v in values]
    csv_path = root / "sweep_metrics.csv"
    rows, done = [], []
    for value, cfg in zip(values, configs):
        try:
            result = run_pipeline(cfg, backends)
        except MapleError as exc:
            write_metrics_csv(csv_path, rows, ("axis", "axis_value"))
            raise SweepError(f"sweep member {axis}={format_value(value)} failed: {exc}", done, csv_path) from exc
        metrics_file = result.run_dir / "evaluate" / "metrics.csv"
        member_rows = read_metrics_csv(metrics_file) if metrics_file.is_file() else []
        for r in member_rows:
            rows.append({"axis": axis, "axis_value": format_value(value), **r})
        done.append(format_value(value))
    write_metrics_csv(csv_path, rows, ("axis", "axis_value"))
    return csv_path
