"""AIM-style adaptive marginal synthesizer for categorical metadata under rho-zCDP.

Select a badly-fit workload marginal with the exponential mechanism, measure it
with the Gaussian mechanism, refit the log-linear model, and repeat until the
budget is spent. The per-round budget grows when a new measurement stops
moving the model by more than its own noise level.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import InvalidArgumentError
from ..privacy import INF, SpendLedger, compose, even_splits, fits_within, gaussian_cost, sigma_for_rho
from ..schema import MetadataSchema, MetadataTable, project_marginal, schema_from_dict, schema_to_dict
from . import estimation
from .estimation import DEFAULT_MAX_CELLS, Measurement
from .graphical import Clique, JunctionTree, LogLinearModel, cell_count

log = logging.getLogger(__name__)

_NOISE_L1 = math.sqrt(2.0 / math.pi)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class Workload:
    cliques: list[Clique]
    weights: list[float]

    def __post_init__(self):
        self.cliques = [tuple(sorted(int(a) for a in c)) for c in self.cliques]
        if len(self.weights) != len(self.cliques):
            raise InvalidArgumentError("one weight per clique required")
        if len(set(self.cliques)) != len(self.cliques):
            raise InvalidArgumentError("workload cliques must be distinct")
        if any(not 1 <= len(c) <= 3 for c in self.cliques):
            raise InvalidArgumentError("workload cliques must have 1 to 3 attributes")
        if any(w <= 0 for w in self.weights):
            raise InvalidArgumentError("workload weights must be positive")

    def __len__(self) -> int:
        return len(self.cliques)

    def subset(self, keep: Sequence[int]) -> "Workload":
        return Workload([self.cliques[i] for i in keep], [self.weights[i] for i in keep])


@dataclass
class AimParams:
    rounds: int = 16
    init_fraction: float = 0.1
    select_fraction: float = 0.1
    anneal_factor: float = 2.0
    max_cells: int = DEFAULT_MAX_CELLS
    max_iters: int = 1000
    tol: float = 1e-6
    # noiseless runs stop once every candidate is fit to within this L1 count error
    noiseless_tol: float = 1e-6


def default_workload(schema: MetadataSchema) -> Workload:
    d = len(schema)
    cliques = [(i,) for i in range(d)] + list(itertools.combinations(range(d), 2))
    return Workload(cliques, [1.0] * len(cliques))


def attach_schema(model: LogLinearModel, schema: MetadataSchema) -> LogLinearModel:
    if tuple(model.sizes) != schema.sizes:
        raise InvalidArgumentError("model domain does not match the schema")
    model.schema = schema
    return model


def measure_marginal(table: MetadataTable, clique: Sequence[int], sigma: float, rng_seed=None,
                     ledger: SpendLedger | None = None, rho: float | None = None,
                     label: str | None = None) -> Measurement:
    """Gaussian-noised marginal counts. One row changes one cell by 1 (L2 sensitivity 1).

    The ledger is charged ``rho`` when given (callers pass the planned share so that
    composed totals add up exactly), otherwise the Gaussian cost implied by ``sigma``.
    """
    clique = tuple(clique)
    exact = project_marginal(table, clique)
    noisy = exact + sigma * _rng(rng_seed).standard_normal(exact.size) if sigma > 0 else exact.copy()
    if ledger is not None:
        ledger.charge(label or f"measure{clique}", gaussian_cost(1.0, sigma) if rho is None else rho)
    return Measurement(clique, noisy, sigma)


def clique_qualities(candidates: Workload, model: LogLinearModel, table: MetadataTable,
                     sigma: float, answers: dict[Clique, np.ndarray] | None = None) -> np.ndarray:
    """Weighted L1 error of each candidate, minus the L1 mass the next measurement's noise would add."""
    scores = np.empty(len(candidates))
    for i, (cl, w) in enumerate(zip(candidates.cliques, candidates.weights)):
        x = answers[cl] if answers is not None and cl in answers else project_marginal(table, cl)
        bias = _NOISE_L1 * sigma * x.size
        scores[i] = w * (np.abs(x - model.counts(cl)).sum() - bias)
    return scores


def selection_probabilities(qualities: np.ndarray, weights: Sequence[float], rho_select: float) -> np.ndarray:
    """Exponential-mechanism distribution exp(eps * q / (2 * max_weight)), eps = sqrt(8 rho)."""
    qualities = np.asarray(qualities, dtype=float)
    if math.isinf(rho_select):
        probs = np.zeros(len(qualities))
        probs[int(np.argmax(qualities))] = 1.0
        return probs
    eps = math.sqrt(8.0 * rho_select)
    logits = eps * qualities / (2.0 * max(weights))
    logits -= logits.max()
    probs = np.exp(logits)
    return probs / probs.sum()


def select_clique(candidates: Workload, model: LogLinearModel, table: MetadataTable, rho_select: float,
                  rng_seed=None, sigma: float = 0.0, answers: dict[Clique, np.ndarray] | None = None,
                  ledger: SpendLedger | None = None, label: str = "select") -> Clique:
    """Pick the worst-approximated candidate clique under the exponential mechanism.

    ``rho_select = inf`` returns the exact argmax, first index winning ties.
    """
    if len(candidates) == 0:
        raise InvalidArgumentError("no candidate cliques")
    if not rho_select > 0:
        raise InvalidArgumentError("rho_select must be positive")
    q = clique_qualities(candidates, model, table, sigma, answers)
    probs = selection_probabilities(q, candidates.weights, rho_select)
    idx = int(np.argmax(q)) if math.isinf(rho_select) else int(_rng(rng_seed).choice(len(q), p=probs))
    if ledger is not None:
        ledger.charge(label, rho_select)
    return candidates.cliques[idx]


def estimate(measurements: Sequence[Measurement], schema: MetadataSchema, max_iters: int = 1000,
             tol: float = 1e-6, initial: LogLinearModel | None = None,
             max_cells: int = DEFAULT_MAX_CELLS) -> LogLinearModel:
    model = estimation.estimate(measurements, schema.sizes, max_iters, tol, initial, max_cells=max_cells)
    return attach_schema(model, schema)


def _fits(model: LogLinearModel, clique: Clique, max_cells: int) -> bool:
    if model.tree.covers(clique):
        return True
    return JunctionTree(model.sizes, list(model.cliques) + [clique]).total_cells <= max_cells


@dataclass
class _Spend:
    """Local record of what this run charged, mirrored into the caller's ledger."""

    budget: float
    ledger: SpendLedger | None
    rhos: list[float] = field(default_factory=list)

    @property
    def total(self) -> float:
        return compose(self.rhos)

    def charge(self, label: str, rho: float) -> None:
        self.rhos.append(rho)
        if self.ledger is not None:
            self.ledger.charge(label, rho)


def run_aim(table: MetadataTable, workload: Workload | None, rho_total: float, params: AimParams | None = None,
            ledger: SpendLedger | None = None, seed=None) -> LogLinearModel:
    if not rho_total > 0:
        raise InvalidArgumentError(f"rho_total must be positive, got {rho_total}")
    params = params or AimParams()
    schema = table.schema
    workload = workload or default_workload(schema)
    rng = _rng(seed)
    spend = _Spend(rho_total, ledger)
    answers = {cl: project_marginal(table, cl) for cl in workload.cliques}
    d = len(schema)
    oneway = [(i,) for i in range(d)]

    if math.isinf(rho_total):
        return _run_noiseless(table, workload, params, spend, answers, oneway)

    init_shares = even_splits(rho_total * params.init_fraction, d)
    measurements = []
    for cl, share in zip(oneway, init_shares):
        measurements.append(measure_marginal(table, cl, sigma_for_rho(1.0, share), rng))
        spend.charge(f"aim/init{cl}", share)
    model = estimate(measurements, schema, params.max_iters, params.tol, max_cells=params.max_cells)

    rho_round = (rho_total - spend.total) / params.rounds
    t = 0
    while True:
        t += 1
        remaining = rho_total - spend.total
        final = remaining < 2.0 * rho_round
        if final:
            rho_round = remaining
        rho_sel = params.select_fraction * rho_round
        rho_meas = rho_round - rho_sel
        while rho_meas > 0 and not fits_within(spend.rhos + [rho_sel, rho_meas], rho_total):
            rho_meas = math.nextafter(rho_meas, 0.0)
        if rho_meas <= 0 or rho_sel <= 0:
            break
        sigma = sigma_for_rho(1.0, rho_meas)

        keep = [i for i, cl in enumerate(workload.cliques) if _fits(model, cl, params.max_cells)]
        cands = workload.subset(keep)
        cl = select_clique(cands, model, table, rho_sel, rng, sigma, answers)
        spend.charge(f"aim/select/{t}", rho_sel)
        measurements.append(measure_marginal(table, cl, sigma, rng))
        spend.charge(f"aim/measure/{t}{cl}", rho_meas)

        before = model.counts(cl)
        model = estimate(measurements, schema, params.max_iters, params.tol, initial=model,
                         max_cells=params.max_cells)
        moved = np.abs(model.counts(cl) - before).sum()
        log.debug("aim round %d: clique %s sigma %.3g moved %.3g", t, cl, sigma, moved)
        if final:
            break
        if moved <= _NOISE_L1 * sigma * cell_count(schema.sizes, cl):
            rho_round *= params.anneal_factor

    assert spend.total <= rho_total, (spend.total, rho_total)
    return model


def _run_noiseless(table, workload, params, spend, answers, oneway) -> LogLinearModel:
    schema = table.schema
    measurements = []
    for cl in oneway:
        measurements.append(measure_marginal(table, cl, 0.0))
        spend.charge(f"aim/init{cl}", INF)
    model = estimate(measurements, schema, params.max_iters, params.tol, max_cells=params.max_cells)
    measured = set(oneway)
    for t in range(1, params.rounds + 1):
        keep = [i for i, cl in enumerate(workload.cliques)
                if cl not in measured and _fits(model, cl, params.max_cells)]
        if not keep:
            break
        cands = workload.subset(keep)
        q = clique_qualities(cands, model, table, 0.0, answers)
        if q.max() <= params.noiseless_tol:
            break
        cl = select_clique(cands, model, table, INF, None, 0.0, answers)
        spend.charge(f"aim/select/{t}", INF)
        measurements.append(measure_marginal(table, cl, 0.0))
        spend.charge(f"aim/measure/{t}{cl}", INF)
        measured.add(cl)
        model = estimate(measurements, schema, params.max_iters, params.tol, initial=model,
                         max_cells=params.max_cells)
    return model


def sample_synthetic(model: LogLinearModel, n_rows: int, rng_seed=None) -> MetadataTable:
    if n_rows < 0:
        raise InvalidArgumentError("n_rows must be >= 0")
    schema = getattr(model, "schema", None)
    if schema is None:
        raise InvalidArgumentError("model has no schema attached")
    return MetadataTable(schema, model.sample(n_rows, _rng(rng_seed)))


def save_model(model: LogLinearModel, path: str | Path) -> None:
    data = {"format": "maple-loglinear/1", "schema": schema_to_dict(model.schema), **model.to_dict()}
    Path(path).write_text(json.dumps(data), encoding="utf-8")


def load_model(path: str | Path) -> LogLinearModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return attach_schema(LogLinearModel.from_dict(data), schema_from_dict(data["schema"]))
