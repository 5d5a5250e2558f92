"""Private Evolution with augmented prompts: initialize, vote, select, vary.

Iteration t computes a noisy nearest-neighbor vote histogram of the private texts over
the current pool, resamples ``n_syn`` winners, and (unless it is the last iteration)
paraphrases each winner ``L`` times. The last selection is the output, so ``T`` is the
exact number of histogram queries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._seeding import derive_seed
from .backends.base import CompletionRequest, map_ordered
from .errors import BackendError, BudgetExceededError, InvalidArgumentError, PipelineError
from .privacy import SpendLedger, even_splits, gaussian_cost, sigma_for_rho
from .prompts import build_variation_prompt

log = logging.getLogger(__name__)


@dataclass
class CandidatePool:
    texts: list[str]
    embeddings: np.ndarray
    generation: int = 0

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=float)
        if emb.size:
            emb = emb.reshape(len(self.texts), -1)
        else:
            # numpy cannot infer a width from an empty array
            emb = emb.reshape(len(self.texts), emb.shape[-1] if emb.ndim == 2 else 0)
        self.embeddings = emb
        if len(self.texts) and not np.allclose(np.linalg.norm(self.embeddings, axis=1), 1.0, atol=1e-6):
            raise InvalidArgumentError("pool embeddings must have unit norm")

    def __len__(self) -> int:
        return len(self.texts)

    def take(self, indices: Sequence[int]) -> "CandidatePool":
        idx = list(indices)
        return CandidatePool([self.texts[i] for i in idx], self.embeddings[idx], self.generation)


@dataclass
class VoteHistogram:
    counts: np.ndarray
    sigma: float
    exact: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PeParams:
    n_syn: int
    iterations: int
    variations_per_selected: int = 1
    rho_pe: float = math.inf
    seed: int = 0
    max_tokens: int = 512
    temperature: float = 1.0
    max_concurrency: int = 8
    document_kind: str = "text"

    def __post_init__(self):
        if self.n_syn < 1:
            raise InvalidArgumentError("n_syn must be >= 1")
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be >= 0")
        if self.variations_per_selected < 1:
            raise InvalidArgumentError("variations_per_selected must be >= 1")
        if not self.rho_pe >= 0:
            raise InvalidArgumentError("rho_pe must be >= 0")


@dataclass
class PeResult:
    pool: CandidatePool
    metrics: list[dict]
    histograms: list[VoteHistogram]


def _embed(embedder, texts: Sequence[str]) -> np.ndarray:
    vecs = np.asarray(embedder.embed(list(texts)), dtype=float)
    return vecs.reshape(len(texts), -1)


def random_init(n_syn: int, prompt_source: Callable[[int], str] | Sequence[str], backend, embedder,
                seed: int = 0, max_tokens: int = 512, temperature: float = 1.0,
                max_concurrency: int = 8) -> CandidatePool:
    """Generate ``n_syn`` texts, the i-th from the i-th prompt. Any failure aborts."""
    if n_syn < 1:
        raise InvalidArgumentError("n_syn must be >= 1")
    get = prompt_source if callable(prompt_source) else prompt_source.__getitem__

    def one(i: int) -> str:
        req = CompletionRequest(get(i), max_tokens=max_tokens, temperature=temperature,
                                seed=derive_seed(seed, "init", i))
        try:
            text = backend.complete(req)
        except BackendError as exc:
            raise PipelineError(f"initialization prompt {i} failed: {exc}") from exc
        if not text.strip():
            raise PipelineError(f"initialization prompt {i} returned empty text")
        return text

    texts = map_ordered(one, range(n_syn), max_concurrency)
    return CandidatePool(texts, _embed(embedder, texts), 0)


def nearest_counts(private_embeddings: np.ndarray, pool_embeddings: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Votes per pool entry: each private vector picks its max-inner-product entry (lowest index on ties)."""
    private_embeddings = np.asarray(private_embeddings, dtype=float)
    counts = np.zeros(len(pool_embeddings), dtype=np.int64)
    for start in range(0, len(private_embeddings), chunk):
        sims = private_embeddings[start: start + chunk] @ pool_embeddings.T
        counts += np.bincount(np.argmax(sims, axis=1), minlength=len(pool_embeddings))
    return counts


def dp_nn_histogram(private_embeddings: np.ndarray, pool: CandidatePool, sigma: float, seed=None,
                    ledger: SpendLedger | None = None, rho: float | None = None,
                    label: str = "pe/histogram") -> VoteHistogram:
    """Nearest-neighbor vote counts plus N(0, sigma^2) per bin.

    Adding or removing one private sample moves one count by 1, so the L2 sensitivity is 1.
    The ledger is charged ``rho`` if given, else the Gaussian cost of ``sigma``.
    """
    if len(pool) == 0:
        raise InvalidArgumentError("pool is empty")
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    exact = nearest_counts(private_embeddings, pool.embeddings) if len(private_embeddings) else np.zeros(len(pool), np.int64)
    counts = exact.astype(float)
    if sigma > 0:
        counts = counts + sigma * np.random.default_rng(seed).standard_normal(len(pool))
    if ledger is not None:
        ledger.charge(label, gaussian_cost(1.0, sigma) if rho is None else rho)
    return VoteHistogram(counts, sigma, exact)


def select_candidates(pool: CandidatePool, histogram: VoteHistogram, n_syn: int, seed=None) -> list[int]:
    """Indices of ``n_syn`` draws with replacement, probability proportional to the clamped counts."""
    counts = np.asarray(histogram.counts, dtype=float)
    if len(counts) != len(pool):
        raise InvalidArgumentError("histogram does not match the pool")
    clamped = np.clip(counts, 0.0, None)
    total = clamped.sum()
    probs = np.full(len(pool), 1.0 / len(pool)) if total <= 0 else clamped / total
    return [int(i) for i in np.random.default_rng(seed).choice(len(pool), size=n_syn, p=probs)]


def variation(selected_texts: Sequence[str], backend, L: int, seed: int = 0, embedder=None,
              selected_embeddings: np.ndarray | None = None, generation: int = 1, max_tokens: int = 512,
              temperature: float = 1.0, max_concurrency: int = 8, document_kind: str = "text") -> CandidatePool:
    """Selected texts followed by ``L`` paraphrases of each (grouped by source, in order)."""
    if L < 1:
        raise InvalidArgumentError("L must be >= 1")
    jobs = [(i, j) for i in range(len(selected_texts)) for j in range(L)]

    def one(job) -> str:
        i, j = job
        text = selected_texts[i]
        req = CompletionRequest(build_variation_prompt(text, document_kind), max_tokens=max_tokens,
                                temperature=temperature, seed=derive_seed(seed, "var", i, j))
        try:
            out = backend.complete(req)
        except BackendError as exc:
            log.warning("variation of text %d failed (%s); keeping the original", i, exc)
            return text
        return out if out.strip() else text

    varied = map_ordered(one, jobs, max_concurrency)
    texts = list(selected_texts) + varied
    if embedder is None:
        raise InvalidArgumentError("variation needs an embedder")
    if selected_embeddings is not None:
        emb = np.vstack([selected_embeddings, _embed(embedder, varied)]) if varied else selected_embeddings
    else:
        emb = _embed(embedder, texts)
    return CandidatePool(texts, emb, generation)


def run_pe(private_texts: Sequence[str] | None, init_pool: CandidatePool, params: PeParams, backend, embedder,
           ledger: SpendLedger | None = None, on_iteration: Callable[[int, list[str]], dict] | None = None,
           private_embeddings: np.ndarray | None = None) -> PeResult:
    """Run ``params.iterations`` rounds of vote, select and vary.

    ``on_iteration(t, texts)`` is called with the initialization (t=0, first n_syn texts)
    and with each round's selected set; its dicts are collected as metrics.
    """
    T, n_syn = params.iterations, params.n_syn
    metrics: list[dict] = []
    if on_iteration is not None:
        metrics.append({"iteration": 0, **on_iteration(0, init_pool.texts[:n_syn])})
    if T == 0:
        return PeResult(init_pool.take(range(min(n_syn, len(init_pool)))), metrics, [])

    if params.rho_pe == 0:
        raise BudgetExceededError("PE iterations need a positive budget")
    shares = even_splits(params.rho_pe, T)
    if ledger is not None and not ledger.can_afford(math.fsum(shares) if math.isfinite(params.rho_pe) else math.inf):
        raise BudgetExceededError(f"ledger cannot afford rho_pe={params.rho_pe!r} (remaining {ledger.remaining!r})")

    if private_embeddings is None:
        private_embeddings = _embed(embedder, list(private_texts or []))
    pool = init_pool
    histograms = []
    selected = pool
    for t in range(1, T + 1):
        sigma = sigma_for_rho(1.0, shares[t - 1])
        hist = dp_nn_histogram(private_embeddings, pool, sigma, derive_seed(params.seed, "hist", t),
                               ledger, shares[t - 1], f"pe/histogram/{t}")
        histograms.append(hist)
        idx = select_candidates(pool, hist, n_syn, derive_seed(params.seed, "select", t))
        selected = pool.take(idx)
        selected.generation = t
        if on_iteration is not None:
            metrics.append({"iteration": t, **on_iteration(t, selected.texts)})
        if t < T:
            pool = variation(selected.texts, backend, params.variations_per_selected,
                             derive_seed(params.seed, "variation", t), embedder, selected.embeddings, t,
                             params.max_tokens, params.temperature, params.max_concurrency, params.document_kind)
    return PeResult(selected, metrics, histograms)
