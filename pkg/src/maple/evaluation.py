"""Distribution-alignment metrics: per-attribute JS distance and a quantized MAUVE score."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans

from .annotator import annotate_corpus
from .errors import EvaluationError, InvalidArgumentError
from .schema import MetadataSchema, MetadataTable, project_marginal


def _check_dist(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"{name} is not a probability vector")
    return p


def _kl2_to_mix(p: np.ndarray, q: np.ndarray) -> float:
    # KL(p || (p+q)/2) without forming the halved mixture, which underflows for denormal masses
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(2.0 * p[mask] / (p[mask] + q[mask]))))


def js_distance(p, q) -> float:
    """Square root of the base-2 Jensen-Shannon divergence; lies in [0, 1]."""
    p, q = _check_dist(p, "p"), _check_dist(q, "q")
    if p.shape != q.shape:
        raise InvalidArgumentError("p and q differ in length")
    div = 0.5 * (_kl2_to_mix(p, q) + _kl2_to_mix(q, p))
    return float(math.sqrt(min(1.0, max(0.0, div))))


def metadata_jsd(synthetic: MetadataTable, private: MetadataTable, schema: MetadataSchema | None = None) -> dict:
    schema = schema or private.schema
    if len(synthetic) == 0 or len(private) == 0:
        raise InvalidArgumentError("metadata_jsd needs nonempty tables")
    syn, priv = synthetic.restrict(schema), private.restrict(schema)
    per = {}
    for i, attr in enumerate(schema.attributes):
        p = project_marginal(syn, (i,))
        q = project_marginal(priv, (i,))
        per[attr.name] = js_distance(p / p.sum(), q / q.sum())
    return {"per_attribute_jsd": per, "avg_jsd": float(np.mean(list(per.values())))}


def default_clusters(n_points: int) -> int:
    return max(2, min(50, n_points // 10))


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def divergence_frontier(p: np.ndarray, q: np.ndarray, scale_c: float = 5.0, grid: int = 99) -> np.ndarray:
    """Frontier points (exp(-c KL(Q||R)), exp(-c KL(P||R))) for R = l P + (1 - l) Q, plus both endpoints."""
    lambdas = np.linspace(0, 1, grid + 2)[1:-1]
    pts = [(0.0, 1.0)]
    for lam in lambdas:
        r = lam * p + (1 - lam) * q
        pts.append((math.exp(-scale_c * _kl(q, r)), math.exp(-scale_c * _kl(p, r))))
    pts.append((1.0, 0.0))
    return np.array(pts)


def frontier_area(points: np.ndarray) -> float:
    pts = points[np.argsort(points[:, 0], kind="stable")]
    return float(np.sum(np.diff(pts[:, 0]) * 0.5 * (pts[1:, 1] + pts[:-1, 1])))


def mauve_lite(syn_embeddings, priv_embeddings, k_clusters: int | None = None, scale_c: float = 5.0,
               lambda_grid_size: int = 99, seed: int = 0) -> float:
    """Area under the divergence frontier of k-means cluster histograms (add-1 smoothed)."""
    syn = np.asarray(syn_embeddings, dtype=float)
    priv = np.asarray(priv_embeddings, dtype=float)
    if len(syn) == 0 or len(priv) == 0:
        raise InvalidArgumentError("mauve_lite needs two nonempty embedding sets")
    data = np.vstack([syn, priv])
    k = default_clusters(len(data)) if k_clusters is None else k_clusters
    if k < 2:
        raise InvalidArgumentError("k_clusters must be >= 2")
    if k > len(data):
        raise InvalidArgumentError(f"k_clusters={k} exceeds the {len(data)} points")
    labels = KMeans(n_clusters=k, n_init=1, max_iter=100, random_state=seed).fit_predict(data)
    p = np.bincount(labels[: len(syn)], minlength=k) + 1.0
    q = np.bincount(labels[len(syn):], minlength=k) + 1.0
    return frontier_area(divergence_frontier(p / p.sum(), q / q.sum(), scale_c, lambda_grid_size))


@dataclass
class EvalReport:
    per_attribute_jsd: dict
    avg_jsd: float
    mauve_lite: float
    sample_sizes: tuple[int, int]
    failure_rates: tuple[float, float] = (0.0, 0.0)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


@dataclass
class PrivateReference:
    """Annotated and embedded private texts, computed once and reused across evaluations."""

    table: MetadataTable
    embeddings: np.ndarray
    failure_rate: float


def prepare_private(private_texts: Sequence[str], schema: MetadataSchema, annotator, embedder,
                    max_failure_rate: float = 0.2, max_concurrency: int = 4) -> PrivateReference:
    table, results = annotate_corpus(private_texts, annotator, schema, max_concurrency=max_concurrency)
    rate = _failure_rate(results)
    if rate > max_failure_rate:
        raise EvaluationError(f"private annotation failure rate {rate:.1%} exceeds {max_failure_rate:.0%}")
    return PrivateReference(table, np.asarray(embedder.embed(list(private_texts))), rate)


def _failure_rate(results) -> float:
    return sum(r.status == "failed" for r in results) / len(results) if results else 0.0


def evaluate(synthetic_texts: Sequence[str], private_texts: Sequence[str] | None, schema: MetadataSchema, annotator,
             embedder, max_failure_rate: float = 0.2, k_clusters: int | None = None, scale_c: float = 5.0,
             lambda_grid_size: int = 99, seed: int = 0, reference: PrivateReference | None = None,
             max_concurrency: int = 4, synthetic_embeddings: np.ndarray | None = None) -> EvalReport:
    if not synthetic_texts:
        raise InvalidArgumentError("no synthetic texts to evaluate")
    if reference is None:
        reference = prepare_private(private_texts, schema, annotator, embedder, max_failure_rate, max_concurrency)
    syn_table, results = annotate_corpus(synthetic_texts, annotator, schema, max_concurrency=max_concurrency)
    rate = _failure_rate(results)
    if rate > max_failure_rate or len(syn_table) == 0:
        raise EvaluationError(f"synthetic annotation failure rate {rate:.1%} exceeds {max_failure_rate:.0%}")
    jsd = metadata_jsd(syn_table, reference.table, schema)
    emb = np.asarray(embedder.embed(list(synthetic_texts))) if synthetic_embeddings is None else synthetic_embeddings
    score = mauve_lite(emb, reference.embeddings, k_clusters, scale_c, lambda_grid_size, seed)
    return EvalReport(jsd["per_attribute_jsd"], jsd["avg_jsd"], score,
                      (len(synthetic_texts), len(reference.embeddings)), (rate, reference.failure_rate))
