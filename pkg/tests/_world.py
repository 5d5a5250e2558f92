"""Shared mock world for the end-to-end acceptance checks.

A skewed, correlated private corpus rendered by the mock generator, plus helpers that run
one arm (maple, a weak-schema maple, or plain augpe) and report avg_jsd per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maple.aim import run_aim, sample_synthetic
from maple.backends import HashEmbedder, MockCompletionBackend, mock_corpus, skewed_table
from maple.evaluation import PrivateReference, evaluate
from maple.pe import PeParams, random_init, run_pe
from maple.privacy import calibrate_rho, split_budget
from maple.prompts import DonatedPair, PromptPlan, PromptSource
from maple.schema import MetadataTable, load_schema

N_PRIVATE = 3000
N_DONATED = 50
N_SYN = 500
EPSILON = 4.0
K_INCONTEXT = 10
HORIZON = 8
THRESHOLD = 0.15
WEAK_ATTRIBUTES = ("primary_research_area", "word_count")


@dataclass
class World:
    seed: int
    schema: object
    backend: MockCompletionBackend
    embedder: HashEmbedder
    private_texts: list
    private_table: MetadataTable
    donated: list
    reference: PrivateReference
    rho_total: float


def build_world(seed: int) -> World:
    schema = load_schema("biorxiv")
    table = skewed_table(schema, N_PRIVATE + N_DONATED, seed)
    backend = MockCompletionBackend(schema, p_drift=0.1)
    texts = mock_corpus(table, backend.background_vocab, seed)
    private_table = MetadataTable(schema, table.data[:N_PRIVATE])
    donated = [DonatedPair(r, t) for r, t in zip(table.rows[N_PRIVATE:], texts[N_PRIVATE:])]
    embedder = HashEmbedder()
    private_texts = texts[:N_PRIVATE]
    reference = PrivateReference(private_table, embedder.embed(private_texts), 0.0)
    return World(seed, schema, backend, embedder, private_texts, private_table, donated, reference,
                 calibrate_rho(EPSILON, 1.0 / N_PRIVATE))


def run_arm(world: World, arm: str, iterations: int = HORIZON) -> list[float]:
    """avg_jsd of the initialization followed by each PE iteration's selected set."""
    s = world.schema
    if arm == "augpe":
        source = PromptSource(PromptPlan("plain"), s)
        rho_pe = world.rho_total
    else:
        sub = s if arm == "maple" else s.subset(WEAK_ATTRIBUTES)
        rho_meta, rho_pe = split_budget(world.rho_total)
        model = run_aim(world.private_table.restrict(sub), None, rho_meta, seed=world.seed)
        syn = sample_synthetic(model, N_SYN, world.seed + 1)
        plan = PromptPlan("maple", K_INCONTEXT, [d.restrict(sub) for d in world.donated])
        source = PromptSource(plan, sub, syn.rows)

    def score(t, texts):
        report = evaluate(texts, None, s, world.backend, world.embedder, reference=world.reference,
                          max_concurrency=1)
        return {"avg_jsd": report.avg_jsd}

    init = random_init(N_SYN, source, world.backend, world.embedder, seed=world.seed, max_concurrency=1)
    params = PeParams(N_SYN, iterations, 1, rho_pe, seed=world.seed, max_concurrency=1)
    result = run_pe(world.private_texts, init, params, world.backend, world.embedder,
                    on_iteration=score, private_embeddings=world.reference.embeddings)
    return [m["avg_jsd"] for m in result.metrics]


def iterations_to_threshold(curve: list[float], threshold: float = THRESHOLD) -> float:
    """First iteration at or below ``threshold``; infinity (censored) if never reached."""
    for t, v in enumerate(curve):
        if v <= threshold:
            return t
    return float("inf")
