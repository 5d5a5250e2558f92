"""Run configuration: dataclasses, YAML loading with presets, validation."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..errors import ConfigError

MODES = ("augpe", "augpe_m", "augpe_e", "maple", "zero_shot", "zero_shot_me")
PROMPT_MODE = {
    "augpe": "plain",
    "augpe_m": "metadata_only",
    "augpe_e": "examples_only",
    "maple": "maple",
    "zero_shot": "plain",
    "zero_shot_me": "maple",
}
SPLIT_MODES = frozenset({"maple", "augpe_m", "zero_shot_me"})
PE_MODES = frozenset({"augpe", "augpe_m", "augpe_e", "maple"})
# zero-shot counterpart of each PE mode, used when an iteration sweep reaches T=0
ZERO_SHOT_OF = {"augpe": "zero_shot", "maple": "zero_shot_me", "zero_shot": "zero_shot",
                "zero_shot_me": "zero_shot_me"}
DEFAULT_SPLIT = (1.0, 9.0)


def uses_metadata(mode: str) -> bool:
    return mode in SPLIT_MODES


@dataclass
class BackendConfig:
    """Completion or embedding backend. ``kind`` is ``mock``/``http`` for completions and
    ``hash``/``http`` for embeddings."""

    kind: str = "mock"
    model: str | None = None
    base_url: str | None = None
    api_key: str | None = None
    redact_text: bool = True
    max_retries: int = 2
    initial_delay: float = 0.5
    timeout: float = 60.0
    max_concurrency: int = 8
    # mock completion knobs
    p_drift: float = 0.1
    p_prior: float = 0.3
    prior_exponent: float = 1.0
    # hash embedder knobs
    dim: int = 256
    hash_seed: int = 0


@dataclass
class DataConfig:
    private: str = ""
    donated: str | None = None
    schema: str = "biorxiv"
    # attributes used for metadata synthesis and prompts; None means the full schema
    schema_subset: list[str] | None = None


@dataclass
class PeConfig:
    n_syn: int = 2000
    iterations: int = 10
    variations_per_selected: int = 1
    k_incontext: int = 10
    max_tokens: int = 512
    temperature: float = 1.0


@dataclass
class AimConfig:
    rounds: int = 16
    init_fraction: float = 0.1
    select_fraction: float = 0.1
    anneal_factor: float = 2.0
    max_cells: int = 10**7
    max_iters: int = 1000
    tol: float = 1e-6


@dataclass
class EvalConfig:
    enabled: bool = True
    max_failure_rate: float = 0.2
    k_clusters: int | None = None
    scale_c: float = 5.0
    every_iteration: bool = True


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    mode: str = "maple"
    epsilon: float = 4.0
    delta: float | None = None
    split: tuple[float, float] | None = None
    pe: PeConfig = field(default_factory=PeConfig)
    aim: AimConfig = field(default_factory=AimConfig)
    generator: BackendConfig = field(default_factory=BackendConfig)
    annotator: BackendConfig | None = None
    embedder: BackendConfig = field(default_factory=lambda: BackendConfig(kind="hash"))
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    run_id: str | None = None
    # directory with replacement prompt templates
    templates: str | None = None
    # directory of the config file; relative data paths resolve against it
    base_dir: str | None = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    # ---- validation ---------------------------------------------------------
    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if not (self.epsilon > 0):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.split is not None:
            if self.mode not in SPLIT_MODES:
                raise ConfigError(f"a budget split only applies to {sorted(SPLIT_MODES)}, not mode {self.mode!r}")
            if len(self.split) != 2 or min(self.split) <= 0:
                raise ConfigError(f"split must be two positive numbers, got {self.split}")
            self.split = (float(self.split[0]), float(self.split[1]))
        T = self.pe.iterations
        if T < 0:
            raise ConfigError("pe.iterations must be >= 0")
        if self.mode in PE_MODES and T == 0:
            raise ConfigError(f"mode {self.mode!r} allocates budget to PE but pe.iterations is 0; "
                              f"use mode {ZERO_SHOT_OF.get(self.mode, 'zero_shot')!r} for a zero-shot run")
        if self.mode not in PE_MODES:
            self.pe.iterations = 0
        if self.pe.n_syn < 1:
            raise ConfigError("pe.n_syn must be >= 1")
        if self.pe.variations_per_selected < 1:
            raise ConfigError("pe.variations_per_selected must be >= 1")
        if self.pe.k_incontext < 0:
            raise ConfigError("pe.k_incontext must be >= 0")
        if self.mode in ("maple", "augpe_e", "zero_shot_me") and self.pe.k_incontext > 0 and not self.data.donated:
            raise ConfigError(f"mode {self.mode!r} needs a donated example file (data.donated)")
        if not self.data.private:
            raise ConfigError("data.private is required")
        for name, b in (("generator", self.generator), ("annotator", self.annotator)):
            if b is not None and b.kind not in ("mock", "http"):
                raise ConfigError(f"{name}.kind must be 'mock' or 'http', got {b.kind!r}")
        if self.embedder.kind not in ("hash", "http"):
            raise ConfigError(f"embedder.kind must be 'hash' or 'http', got {self.embedder.kind!r}")
        if not 0 <= self.evaluation.max_failure_rate <= 1:
            raise ConfigError("evaluation.max_failure_rate must lie in [0, 1]")

    # ---- derived values -----------------------------------------------------
    @property
    def effective_split(self) -> tuple[float, float] | None:
        if self.mode not in SPLIT_MODES:
            return None
        return self.split or DEFAULT_SPLIT

    @property
    def prompt_mode(self) -> str:
        return PROMPT_MODE[self.mode]

    def resolve_path(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def to_dict(self, redact: bool = True) -> dict:
        data = dataclasses.asdict(self)
        data.pop("base_dir", None)
        for b in ("generator", "annotator", "embedder"):
            if redact and data.get(b) and data[b].get("api_key"):
                data[b]["api_key"] = "***"
        data["epsilon"] = _encode_float(self.epsilon)
        return data

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "PipelineConfig":
        """Copy with top-level or dotted (``pe.iterations``) fields replaced, re-validated."""
        data = self.to_dict(redact=False)
        for key, value in changes.items():
            _set_dotted(data, key, value)
        return config_from_dict(data, base_dir=self.base_dir)


def _encode_float(x: float):
    return "inf" if math.isinf(x) else x


def _decode_float(x) -> float:
    if isinstance(x, str):
        if x.strip().lower() in ("inf", "infinity", "∞"):
            return math.inf
        try:
            return float(x)
        except ValueError as exc:
            raise ConfigError(f"not a number: {x!r}") from exc
    return float(x)


def _set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, raw: Mapping | None, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_preset(name: str) -> dict:
    ref = resources.files("maple.data.presets") / f"{name}.yaml"
    if not ref.is_file():
        raise ConfigError(f"no preset named {name!r}")
    return yaml.safe_load(ref.read_text(encoding="utf-8")) or {}


def config_from_dict(raw: Mapping, base_dir: str | Path | None = None) -> PipelineConfig:
    raw = dict(raw)
    if "preset" in raw:
        raw = _merge(load_preset(raw.pop("preset")), raw)
    known = {f.name for f in dataclasses.fields(PipelineConfig)} - {"base_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key in ("mode", "seed", "output_dir", "run_id", "templates"):
        if key in raw:
            kwargs[key] = raw[key]
    if "epsilon" in raw:
        kwargs["epsilon"] = _decode_float(raw["epsilon"])
    if raw.get("delta") is not None:
        kwargs["delta"] = _decode_float(raw["delta"])
    if raw.get("split") is not None:
        kwargs["split"] = tuple(_decode_float(x) for x in raw["split"])
    kwargs["data"] = _build(DataConfig, raw.get("data"), "data")
    kwargs["pe"] = _build(PeConfig, raw.get("pe"), "pe")
    kwargs["aim"] = _build(AimConfig, raw.get("aim"), "aim")
    kwargs["generator"] = _build(BackendConfig, raw.get("generator"), "generator")
    if raw.get("annotator") is not None:
        kwargs["annotator"] = _build(BackendConfig, raw["annotator"], "annotator")
    kwargs["embedder"] = _build(BackendConfig, raw.get("embedder") or {"kind": "hash"}, "embedder")
    kwargs["evaluation"] = _build(EvalConfig, raw.get("evaluation"), "evaluation")
    kwargs["base_dir"] = None if base_dir is None else str(base_dir)
    return PipelineConfig(**kwargs)


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    return config_from_dict(raw, base_dir=path.parent.resolve())
