import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from maple.backends import HashEmbedder, MockCompletionBackend, mock_corpus, skewed_table
from maple.errors import EvaluationError, InvalidArgumentError
from maple.evaluation import (EvalReport, default_clusters, divergence_frontier, evaluate, frontier_area,
                              js_distance, mauve_lite, metadata_jsd, prepare_private)
from maple.schema import AttributeDomain, MetadataSchema, MetadataTable

from conftest import random_unit


def test_js_examples():
    assert js_distance([0.3, 0.7], [0.3, 0.7]) == 0
    assert js_distance([1, 0], [0, 1]) == pytest.approx(1.0)
    assert js_distance([0.5, 0.5], [1, 0]) == pytest.approx(0.55793, abs=1e-4)


def test_js_rejects():
    with pytest.raises(InvalidArgumentError):
        js_distance([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(InvalidArgumentError):
        js_distance([1.0], [0.5, 0.5])


_dist = st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: np.array(v) / sum(v))


@settings(max_examples=300, deadline=None)
@given(_dist, _dist, _dist)
def test_js_is_a_metric(p, q, r):
    d = js_distance
    assert d(p, q) == pytest.approx(d(q, p), abs=1e-12)
    assert 0 <= d(p, q) <= 1
    assert d(p, r) <= d(p, q) + d(q, r) + 1e-9


@settings(max_examples=100, deadline=None)
@given(_dist, _dist)
def test_js_zero_iff_equal(p, q):
    assume(np.abs(p - q).max() > 1e-6)
    assert js_distance(p, q) > 0
    assert js_distance(p, p) == 0


def _two_attr():
    return MetadataSchema((AttributeDomain("a", ("x", "y")), AttributeDomain("b", ("p", "q", "r"))))


def test_metadata_jsd_cases():
    s = _two_attr()
    priv = MetadataTable(s, np.array([[0, 0], [0, 1], [1, 2], [1, 2]]))
    assert metadata_jsd(priv, priv)["avg_jsd"] == 0
    disjoint = metadata_jsd(MetadataTable(s, np.array([[0, 0]] * 3)), MetadataTable(s, np.array([[1, 1]] * 3)))
    assert disjoint["avg_jsd"] == pytest.approx(1.0)
    syn = MetadataTable(s, np.array([[0, 0], [0, 0], [0, 1], [1, 1]]))
    # by hand: a is (3/4, 1/4) vs (1/2, 1/2); b is (1/2, 1/2, 0) vs (1/4, 1/4, 1/2)
    ja = js_distance([0.75, 0.25], [0.5, 0.5])
    jb = js_distance([0.5, 0.5, 0.0], [0.25, 0.25, 0.5])
    out = metadata_jsd(syn, priv)
    assert out["per_attribute_jsd"] == pytest.approx({"a": ja, "b": jb})
    assert out["avg_jsd"] == pytest.approx((ja + jb) / 2)
    with pytest.raises(InvalidArgumentError):
        metadata_jsd(MetadataTable(s), priv)


def test_metadata_jsd_subset_schema(biorxiv):
    t = skewed_table(biorxiv, 200, 0)
    weak = biorxiv.subset(["primary_research_area", "word_count"])
    assert set(metadata_jsd(t, t, weak)["per_attribute_jsd"]) == set(weak.names)


class TestMauve:
    def test_identical(self):
        x = random_unit(np.random.default_rng(0), 300, 8)
        assert mauve_lite(x, x.copy()) >= 0.98

    def test_separated_clusters_match_hand_frontier(self):
        rng = np.random.default_rng(1)
        a = np.zeros(8)
        a[0] = 1
        syn = a + 0.01 * rng.standard_normal((50, 8))
        priv = -a + 0.01 * rng.standard_normal((50, 8))
        p = np.array([51, 1]) / 52
        q = np.array([1, 51]) / 52
        score = mauve_lite(syn, priv, k_clusters=2)
        assert score <= 0.2
        assert score == pytest.approx(frontier_area(divergence_frontier(p, q)), abs=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        centers = 3 * random_unit(rng, 4, 6)
        syn = np.vstack([c + 0.05 * rng.standard_normal((30, 6)) for c in centers[:3]])
        priv = np.vstack([c + 0.05 * rng.standard_normal((30, 6)) for c in centers[1:]])
        rot, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        a = mauve_lite(syn, priv, k_clusters=4)
        b = mauve_lite(syn @ rot, priv @ rot, k_clusters=4)
        assert a == pytest.approx(b, abs=1e-9)

    def test_partial_overlap_in_between(self):
        rng = np.random.default_rng(3)
        centers = 3 * random_unit(rng, 3, 6)
        syn = np.vstack([c + 0.05 * rng.standard_normal((40, 6)) for c in centers[:2]])
        priv = np.vstack([c + 0.05 * rng.standard_normal((40, 6)) for c in centers[1:]])
        score = mauve_lite(syn, priv, k_clusters=3)
        assert 0.1 < score < 0.95

    def test_frontier_endpoints(self):
        pts = divergence_frontier(np.array([0.5, 0.5]), np.array([0.5, 0.5]))
        assert pts.shape == (101, 2)
        assert tuple(pts[0]) == (0.0, 1.0) and tuple(pts[-1]) == (1.0, 0.0)

    def test_rejects(self):
        x = random_unit(np.random.default_rng(0), 5, 3)
        with pytest.raises(InvalidArgumentError):
            mauve_lite(x[:0], x)
        with pytest.raises(InvalidArgumentError):
            mauve_lite(x, x, k_clusters=1)
        with pytest.raises(InvalidArgumentError):
            mauve_lite(x, x, k_clusters=11)

    def test_default_clusters(self):
        assert default_clusters(10) == 2 and default_clusters(400) == 40 and default_clusters(10**6) == 50


@pytest.fixture(scope="module")
def world(biorxiv):
    backend = MockCompletionBackend(biorxiv)
    return backend, HashEmbedder()


def _corpus(schema, backend, n, dist_seed, sample_seed):
    table = skewed_table(schema, n, dist_seed, sample_seed=sample_seed)
    return mock_corpus(table, backend.background_vocab, sample_seed)


def test_evaluate_identical(biorxiv, world):
    backend, emb = world
    texts = _corpus(biorxiv, backend, 400, 0, 0)
    report = evaluate(texts, texts, biorxiv, backend, emb)
    assert report.avg_jsd == 0 and report.mauve_lite >= 0.98
    assert report.sample_sizes == (400, 400)


def test_evaluate_same_distribution(biorxiv, world):
    backend, emb = world
    a = _corpus(biorxiv, backend, 1000, 0, 1)
    b = _corpus(biorxiv, backend, 1000, 0, 2)
    assert evaluate(a, b, biorxiv, backend, emb).avg_jsd < 0.1


def test_evaluate_disjoint_supports(biorxiv, world):
    backend, emb = world
    rng = np.random.default_rng(0)
    low = np.stack([rng.integers(0, s // 2, 300) for s in biorxiv.sizes], 1)
    high = np.stack([rng.integers(s // 2, s, 300) for s in biorxiv.sizes], 1)
    a = mock_corpus(MetadataTable(biorxiv, low), backend.background_vocab, 0)
    b = mock_corpus(MetadataTable(biorxiv, high), backend.background_vocab, 1)
    assert evaluate(a, b, biorxiv, backend, emb).avg_jsd > 0.8


def test_evaluate_reuses_reference(biorxiv, world):
    backend, emb = world
    texts = _corpus(biorxiv, backend, 100, 0, 0)
    ref = prepare_private(texts, biorxiv, backend, emb)
    direct = evaluate(texts[:50], texts, biorxiv, backend, emb)
    cached = evaluate(texts[:50], None, biorxiv, backend, emb, reference=ref)
    assert direct.avg_jsd == cached.avg_jsd and direct.mauve_lite == cached.mauve_lite


def test_evaluate_failure_ceiling(biorxiv, world):
    backend, emb = world
    texts = _corpus(biorxiv, backend, 20, 0, 0)
    with pytest.raises(EvaluationError):
        evaluate(["no tokens at all here"] * 10, texts, biorxiv, _Garbage(), emb)
    with pytest.raises(InvalidArgumentError):
        evaluate([], texts, biorxiv, backend, emb)


class _Garbage:
    def complete(self, request):
        return "not json"


def test_report_serialization(tmp_path):
    report = EvalReport({"a": 0.1}, 0.1, 0.9, (10, 20))
    report.to_json(tmp_path / "r.json")
    import json
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["avg_jsd"] == 0.1 and data["sample_sizes"] == [10, 20]
    assert not math.isnan(data["mauve_lite"])
