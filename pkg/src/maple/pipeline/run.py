"""Stage execution with checkpoints: extract -> fit-metadata -> synthesize -> evaluate.

Each stage owns a subdirectory of the run directory holding its outputs and a
``checkpoint.json``. A stage is skipped when its checkpoint records the same input
hash as the current one; otherwise it (and everything after it) re-runs. All outputs
except checkpoint timestamps are deterministic given the config and backends, so an
interrupted run resumes to byte-identical results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from filelock import FileLock, Timeout

from .._seeding import derive_seed
from ..aim import AimParams, run_aim, sample_synthetic, save_model
from ..annotator import annotate_corpus, write_annotation_log
from ..backends.base import BackendPolicy
from ..backends.hashing import HashEmbedder
from ..backends.http import HttpCompletionBackend, HttpConfig, HttpEmbeddingBackend
from ..backends.mock import MockCompletionBackend
from ..errors import BackendError, ConfigError, MapleError, PipelineError, SchemaValidationError
from ..evaluation import EvalReport, PrivateReference, evaluate
from ..pe import PeParams, random_init, run_pe
from ..privacy import INF, SpendLedger, calibrate_rho, split_budget
from ..prompts import DonatedPair, PromptPlan, PromptSource, Templates
from ..schema import MetadataSchema, MetadataTable, load_schema, schema_to_dict, validate_record
from .config import PE_MODES, PipelineConfig, uses_metadata
from .ingest import file_digest, ingest_jsonl, write_jsonl, write_texts

log = logging.getLogger(__name__)

STAGES = ("extract", "fit-metadata", "synthesize", "evaluate")
METRIC_COLUMNS = ("run_id", "mode", "epsilon", "iteration", "avg_jsd", "mauve_lite", "rho_spent")


@dataclass
class Backends:
    generator: object
    annotator: object
    embedder: object


@dataclass
class BudgetPlan:
    delta: float
    rho_total: float
    rho_meta: float
    rho_pe: float

    def to_dict(self) -> dict:
        enc = lambda x: "inf" if math.isinf(x) else x  # noqa: E731
        return {"delta": self.delta, "rho_total": enc(self.rho_total), "rho_meta": enc(self.rho_meta),
                "rho_pe": enc(self.rho_pe)}


@dataclass
class RunResult:
    run_dir: Path
    ledger: SpendLedger
    texts: list[str]
    report: EvalReport | None
    metrics: list[dict] = field(default_factory=list)
    executed: list[str] = field(default_factory=list)


def plan_budget(config: PipelineConfig, n_private: int) -> BudgetPlan:
    """Planned rho per part. The pieces never compose past ``rho_total``."""
    if n_private < 1:
        raise ConfigError("the private corpus is empty")
    delta = config.delta if config.delta is not None else 1.0 / n_private
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta} (private corpus of size {n_private})")
    rho_total = calibrate_rho(config.epsilon, delta)
    rho_meta = rho_pe = 0.0
    split = config.effective_split
    if split is not None:
        rho_meta, rho_pe = split_budget(rho_total, split)
    elif config.mode in PE_MODES:
        rho_pe = rho_total
    if config.mode not in PE_MODES:
        # zero-shot runs leave the PE share of a split unspent
        rho_pe = 0.0
    return BudgetPlan(delta, rho_total, rho_meta, rho_pe)


def build_backends(config: PipelineConfig, schema: MetadataSchema) -> Backends:
    def completion(b):
        if b.kind == "mock":
            return MockCompletionBackend(schema, p_drift=b.p_drift, p_prior=b.p_prior,
                                         prior_exponent=b.prior_exponent)
        return HttpCompletionBackend(_http_config(b))

    gen = completion(config.generator)
    ann = gen if config.annotator is None else completion(config.annotator)
    e = config.embedder
    emb = HashEmbedder(e.dim, seed=e.hash_seed) if e.kind == "hash" else HttpEmbeddingBackend(_http_config(e))
    return Backends(gen, ann, emb)


def _http_config(b) -> HttpConfig:
    if not b.model:
        raise ConfigError("http backends need a model name")
    policy = BackendPolicy(max_retries=b.max_retries, initial_delay=b.initial_delay, timeout=b.timeout,
                           max_concurrency=b.max_concurrency)
    return HttpConfig(b.model, b.base_url, b.api_key, policy, b.redact_text)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()


class _Run:
    """Everything a stage needs, loaded once per invocation."""

    def __init__(self, config: PipelineConfig, backends: Backends | None):
        self.config = config
        self.dir = Path(config.output_dir)
        if config.base_dir and not self.dir.is_absolute():
            self.dir = Path(config.base_dir) / self.dir
        self.run_id = config.run_id or self.dir.name
        self.schema = load_schema(self._schema_source())
        subset = config.data.schema_subset
        try:
            self.sub_schema = self.schema if not subset else self.schema.subset(subset)
        except MapleError as exc:
            raise ConfigError(f"data.schema_subset: {exc}") from exc
        private_path = config.resolve_path(config.data.private)
        self.private_texts = ingest_jsonl(private_path)
        self.inputs = {"private": file_digest(private_path), "schema": _digest(schema_to_dict(self.schema))}
        self.donated: list[DonatedPair] = []
        if config.data.donated:
            donated_path = config.resolve_path(config.data.donated)
            self.donated = self._donated(ingest_jsonl(donated_path, donated=True), donated_path)
            self.inputs["donated"] = file_digest(donated_path)
        self.budget = plan_budget(config, len(self.private_texts))
        tdir = config.resolve_path(config.templates)
        self.templates = Templates.load(tdir)
        if tdir is not None:
            self.inputs["templates"] = _digest([file_digest(p) for p in sorted(Path(tdir).glob("*.txt"))])
        self.backends = backends or build_backends(config, self.schema)

    def _schema_source(self) -> str:
        src = self.config.data.schema
        p = self.config.resolve_path(src)
        return str(p) if p is not None and p.suffix in (".yaml", ".yml", ".json") else src

    def _donated(self, rows: list[dict], path) -> list[DonatedPair]:
        out, bad = [], []
        for n, row in enumerate(rows, 1):
            try:
                out.append(DonatedPair(validate_record(self.schema, row["metadata"]), row["text"]))
            except SchemaValidationError as exc:
                bad.append(f"record {n}: {exc}")
        if bad:
            raise ConfigError(f"{path}: donated metadata does not match the schema: {'; '.join(bad[:10])}")
        return out

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def ledger(self) -> SpendLedger:
        return SpendLedger(self.budget.rho_total)


# ---- checkpoints ---------------------------------------------------------------

def _read_checkpoint(path: Path) -> dict | None:
    f = path / "checkpoint.json"
    if not f.is_file():
        return None
    try:
        return json.loads(f.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None


def _outputs_digest(stage_dir: Path, names: list[str]) -> dict:
    return {n: file_digest(stage_dir / n) for n in names if (stage_dir / n).is_file()}


def _write_checkpoint(stage_dir: Path, stage: str, input_hash: str, ledger: SpendLedger, outputs: list[str],
                      started: float, extra: dict | None = None) -> dict:
    data = {"stage": stage, "input_hash": input_hash, "ledger": ledger.to_dict(),
            "outputs": _outputs_digest(stage_dir, outputs), "started": started, "finished": time.time(),
            **(extra or {})}
    tmp = stage_dir / "checkpoint.json.tmp"
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(stage_dir / "checkpoint.json")
    return data


# ---- stages --------------------------------------------------------------------

def _needs_extract(cfg: PipelineConfig) -> bool:
    return uses_metadata(cfg.mode) or cfg.evaluation.enabled


def _stage_inputs(run: _Run, stage: str, upstream: dict[str, dict]) -> dict:
    c = run.config
    ann = c.annotator or c.generator
    base = {"stage": stage, "inputs": run.inputs}
    if stage == "extract":
        return {**base, "annotator": vars(ann), "needed": _needs_extract(c)}
    if stage == "fit-metadata":
        return {**base, "extract": upstream.get("extract", {}).get("outputs"), "mode": c.mode,
                "epsilon": str(c.epsilon), "budget": run.budget.to_dict(), "aim": vars(c.aim),
                "subset": run.sub_schema.names, "seed": c.seed, "n_syn": c.pe.n_syn}
    if stage == "synthesize":
        return {**base, "fit": upstream["fit-metadata"].get("outputs"), "mode": c.mode, "pe": vars(c.pe),
                "budget": run.budget.to_dict(), "generator": vars(c.generator), "embedder": vars(c.embedder),
                "seed": c.seed}
    return {**base, "extract": upstream["extract"].get("outputs"),
            "synthesize": upstream["synthesize"].get("outputs"), "evaluation": vars(c.evaluation),
            "embedder": vars(c.embedder), "annotator": vars(ann), "seed": c.seed}


def _stage_extract(run: _Run, sdir: Path, ledger: SpendLedger) -> list[str]:
    if not _needs_extract(run.config):
        return []
    ann_cfg = run.config.annotator or run.config.generator
    table, results = annotate_corpus(run.private_texts, run.backends.annotator, run.schema,
                                     max_retries=ann_cfg.max_retries, max_concurrency=ann_cfg.max_concurrency,
                                     templates=run.templates)
    write_annotation_log(results, sdir / "annotations.jsonl")
    write_jsonl(sdir / "private_metadata.jsonl",
                ({"index": i, "metadata": None if r.record is None else r.record.as_dict()}
                 for i, r in enumerate(results)))
    failed = sum(r.status == "failed" for r in results)
    rate = failed / len(results)
    limit = run.config.evaluation.max_failure_rate
    if rate > limit:
        err = PipelineError(f"private annotation failed for {failed} of {len(results)} texts "
                            f"({rate:.1%} > {limit:.0%})")
        reasons = [r.failure_reason or "" for r in results if r.status == "failed"]
        if all(r.startswith("backend:") for r in reasons):
            # nothing reached the parser: report it as an unreachable backend
            raise err from BackendError(reasons[0][len("backend:"):].strip())
        raise err
    return ["annotations.jsonl", "private_metadata.jsonl"]


def _load_private_metadata(run: _Run) -> tuple[MetadataTable, list[int]]:
    rows, keep = [], []
    with open(run.stage_dir("extract") / "private_metadata.jsonl", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            if obj["metadata"] is not None:
                rows.append(validate_record(run.schema, obj["metadata"]))
                keep.append(obj["index"])
    return MetadataTable(run.schema, rows), keep


def _stage_fit(run: _Run, sdir: Path, ledger: SpendLedger) -> list[str]:
    c = run.config
    if not uses_metadata(c.mode):
        return []
    table, _ = _load_private_metadata(run)
    if len(table) == 0:
        raise PipelineError("no private metadata records to fit")
    params = AimParams(rounds=c.aim.rounds, init_fraction=c.aim.init_fraction, select_fraction=c.aim.select_fraction,
                       anneal_factor=c.aim.anneal_factor, max_cells=c.aim.max_cells, max_iters=c.aim.max_iters,
                       tol=c.aim.tol)
    model = run_aim(table.restrict(run.sub_schema), None, run.budget.rho_meta, params, ledger,
                    seed=derive_seed(c.seed, "aim"))
    save_model(model, sdir / "model.json")
    synthetic = sample_synthetic(model, c.pe.n_syn, derive_seed(c.seed, "metadata-sample"))
    synthetic.to_jsonl(sdir / "synthetic_metadata.jsonl")
    return ["model.json", "synthetic_metadata.jsonl"]


def _prompt_plan(run: _Run) -> PromptPlan:
    c = run.config
    mode = c.prompt_mode
    donated = [d.restrict(run.sub_schema) for d in run.donated]
    if mode == "maple":
        return PromptPlan("maple", c.pe.k_incontext, donated)
    if mode == "examples_only":
        return PromptPlan.examples_only(donated, c.pe.k_incontext, derive_seed(c.seed, "examples"))
    return PromptPlan(mode)


def _stage_synthesize(run: _Run, sdir: Path, ledger: SpendLedger) -> list[str]:
    c = run.config
    rows = None
    if uses_metadata(c.mode):
        rows = MetadataTable.from_jsonl(run.sub_schema, run.stage_dir("fit-metadata") / "synthetic_metadata.jsonl").rows
    source = PromptSource(_prompt_plan(run), run.sub_schema, rows, run.templates)
    conc = c.generator.max_concurrency
    init = random_init(c.pe.n_syn, source, run.backends.generator, run.backends.embedder,
                       seed=derive_seed(c.seed, "init"), max_tokens=c.pe.max_tokens,
                       temperature=c.pe.temperature, max_concurrency=conc)
    iter_dir = sdir / "iterations"
    iter_dir.mkdir(exist_ok=True)
    written = []

    def record(t: int, texts: list[str]) -> dict:
        name = f"iterations/iter_{t:03d}.jsonl"
        write_texts(sdir / name, texts)
        written.append(name)
        return {}

    rho_pe = run.budget.rho_pe if c.mode in PE_MODES else 0.0
    params = PeParams(c.pe.n_syn, c.pe.iterations, c.pe.variations_per_selected, rho_pe,
                      seed=derive_seed(c.seed, "pe"), max_tokens=c.pe.max_tokens, temperature=c.pe.temperature,
                      max_concurrency=conc, document_kind=run.schema.document_kind)
    result = run_pe(run.private_texts, init, params, run.backends.generator, run.backends.embedder, ledger,
                    on_iteration=record)
    write_texts(sdir / "synthetic.jsonl", result.pool.texts)
    hist = [{"iteration": t + 1, "sigma": h.sigma, "noisy_counts": np.round(h.counts, 6).tolist()}
            for t, h in enumerate(result.histograms)]
    write_jsonl(sdir / "histograms.jsonl", hist)
    return ["synthetic.jsonl", "histograms.jsonl", *written]


def _read_texts(path: Path) -> list[str]:
    return ingest_jsonl(path)


def _stage_evaluate(run: _Run, sdir: Path, ledger: SpendLedger) -> list[str]:
    c = run.config
    if not c.evaluation.enabled:
        return []
    table, keep = _load_private_metadata(run)
    priv_rate = 1.0 - len(keep) / len(run.private_texts)
    ref = PrivateReference(table, np.asarray(run.backends.embedder.embed(run.private_texts)), priv_rate)
    ann_cfg = c.annotator or c.generator
    syn_dir = run.stage_dir("synthesize")
    files = sorted((syn_dir / "iterations").glob("iter_*.jsonl"))
    if not c.evaluation.every_iteration:
        files = files[-1:]
    metrics = []
    report = None
    for f in files:
        t = int(f.stem.split("_")[1])
        texts = _read_texts(f)
        report = evaluate(texts, None, run.schema, run.backends.annotator, run.backends.embedder,
                          max_failure_rate=c.evaluation.max_failure_rate, k_clusters=c.evaluation.k_clusters,
                          scale_c=c.evaluation.scale_c, seed=derive_seed(c.seed, "mauve") % 2**31,
                          reference=ref, max_concurrency=ann_cfg.max_concurrency)
        metrics.append({"run_id": run.run_id, "mode": c.mode, "epsilon": "inf" if math.isinf(c.epsilon) else c.epsilon,
                        "iteration": t, "avg_jsd": round(report.avg_jsd, 10),
                        "mauve_lite": round(report.mauve_lite, 10), "rho_spent": _rho_at(ledger, t)})
    # the last recorded iteration is the final synthetic set
    final = report
    final.to_json(sdir / "report.json")
    write_metrics_csv(sdir / "metrics.csv", metrics)
    return ["report.json", "metrics.csv"]


def _rho_at(ledger: SpendLedger, t: int):
    """Composed rho after the metadata stage and the first ``t`` PE histograms."""
    rhos = [r for label, r in ledger.entries if label.startswith("aim/")]
    rhos += [r for label, r in ledger.entries
             if label.startswith("pe/histogram/") and int(label.rsplit("/", 1)[1]) <= t]
    total = math.fsum(rhos) if not any(math.isinf(r) for r in rhos) else INF
    return "inf" if math.isinf(total) else total


def write_metrics_csv(path: str | Path, rows: list[dict], extra_columns: tuple[str, ...] = ()) -> None:
    cols = list(extra_columns) + list(METRIC_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


_RUNNERS: dict[str, Callable] = {
    "extract": _stage_extract,
    "fit-metadata": _stage_fit,
    "synthesize": _stage_synthesize,
    "evaluate": _stage_evaluate,
}


def run_pipeline(config: PipelineConfig, backends: Backends | None = None, stop_after: str | None = None,
                 force: bool = False) -> RunResult:
    """Run (or resume) the stages in order, up to and including ``stop_after``."""
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}")
    run = _Run(config, backends)
    run.dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run.dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise PipelineError(f"run directory {run.dir} is locked by another process") from exc
    try:
        return _execute(run, stop_after, force)
    finally:
        lock.release()


def _execute(run: _Run, stop_after: str | None, force: bool) -> RunResult:
    cfg = run.config
    (run.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    ledger = run.ledger()
    checkpoints: dict[str, dict] = {}
    executed = []
    dirty = force
    last = STAGES.index(stop_after) if stop_after else len(STAGES) - 1
    for stage in STAGES[: last + 1]:
        sdir = run.stage_dir(stage)
        input_hash = _digest(_stage_inputs(run, stage, checkpoints))
        ck = _read_checkpoint(sdir)
        if not dirty and ck is not None and ck.get("input_hash") == input_hash and _outputs_intact(sdir, ck):
            log.info("stage %s up to date", stage)
            ledger = SpendLedger.from_dict(ck["ledger"])
            ledger.granted = run.budget.rho_total
            checkpoints[stage] = ck
            continue
        dirty = True
        if sdir.exists():
            shutil.rmtree(sdir)
        sdir.mkdir(parents=True)
        log.info("running stage %s", stage)
        started = time.time()
        outputs = _RUNNERS[stage](run, sdir, ledger)
        checkpoints[stage] = _write_checkpoint(sdir, stage, input_hash, ledger, outputs, started)
        executed.append(stage)
    _write_manifest(run, checkpoints, ledger)

    texts = []
    syn = run.stage_dir("synthesize") / "synthetic.jsonl"
    if "synthesize" in checkpoints and syn.is_file():
        texts = _read_texts(syn)
    report, metrics = None, []
    rep = run.stage_dir("evaluate") / "report.json"
    if "evaluate" in checkpoints and rep.is_file():
        data = json.loads(rep.read_text(encoding="utf-8"))
        data["sample_sizes"] = tuple(data["sample_sizes"])
        data["failure_rates"] = tuple(data["failure_rates"])
        report = EvalReport(**data)
        metrics = read_metrics_csv(run.stage_dir("evaluate") / "metrics.csv")
    return RunResult(run.dir, ledger, texts, report, metrics, executed)


def _outputs_intact(sdir: Path, ck: dict) -> bool:
    for name, digest in ck.get("outputs", {}).items():
        f = sdir / name
        if not f.is_file() or file_digest(f) != digest:
            return False
    return True


def _write_manifest(run: _Run, checkpoints: dict[str, dict], ledger: SpendLedger) -> None:
    manifest = {
        "run_id": run.run_id,
        "mode": run.config.mode,
        "inputs": run.inputs,
        "budget": run.budget.to_dict(),
        "stages": {s: {"input_hash": ck["input_hash"], "outputs": ck["outputs"]} for s, ck in checkpoints.items()},
    }
    (run.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    (run.dir / "ledger.json").write_text(json.dumps(ledger.to_dict(), indent=2), encoding="utf-8")
