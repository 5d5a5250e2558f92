import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from maple.backends import (BackendPolicy, CompletionRequest, HashEmbedder, HttpCompletionBackend, HttpConfig,
                            HttpEmbeddingBackend, MockCompletionBackend, RecordingBackend, hash_embed, map_ordered,
                            mock_corpus, skewed_table, with_retries)
from maple.backends.mock import encode_token, parse_tokens
from maple.errors import BackendError, ConfigError, InvalidArgumentError, RetryableBackendError
from maple.prompts import PromptPlan, build_random_prompt, build_variation_prompt
from maple.schema import MetadataRecord, index_to_record, project_marginal, validate_record


# ---- hash embedder ----------------------------------------------------------------

def test_hash_embedder_basics():
    vecs = hash_embed(["alpha beta", "alpha beta", "gamma", "x"])
    assert vecs.shape == (4, 256)
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(vecs[0], vecs[1])
    assert float(vecs[0] @ vecs[1]) == pytest.approx(1.0, abs=1e-6)
    assert HashEmbedder(dim=64).embed(["abc"]).shape == (1, 64)
    assert HashEmbedder().embed([]).shape == (0, 256)


def test_hash_embedder_seed_changes_buckets():
    a, b = HashEmbedder(seed=0), HashEmbedder(seed=1)
    assert not np.array_equal(a.embed(["some text here"]), b.embed(["some text here"]))


def test_disjoint_ngrams_are_orthogonal():
    emb = HashEmbedder()
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        left = "".join(rng.choice(list("abcdefghij"), 12))
        right = "".join(rng.choice(list("klmnopqrst"), 12))
        if set(emb.buckets(left)) & set(emb.buckets(right)):
            continue  # a hash collision; the property is about collision-free pairs
        checked += 1
        assert float(emb.embed_one(left) @ emb.embed_one(right)) == 0.0
    assert checked >= 50


def test_same_metadata_more_similar(biorxiv):
    backend = MockCompletionBackend(biorxiv)
    emb = HashEmbedder()
    plan = PromptPlan("metadata_only")
    rng = np.random.default_rng(1)
    wins = 0
    for i in range(1000):
        m = index_to_record(biorxiv, int(rng.integers(biorxiv.total_size)))
        other = m
        while other == m:
            other = index_to_record(biorxiv, int(rng.integers(biorxiv.total_size)))
        gen = lambda rec, s: backend.complete(CompletionRequest(build_random_prompt(plan, rec, biorxiv), seed=s))  # noqa: E731
        a, b, c = emb.embed([gen(m, 3 * i), gen(m, 3 * i + 1), gen(other, 3 * i + 2)])
        wins += float(a @ b) > float(a @ c)
    assert wins >= 990


# ---- mock completion backend --------------------------------------------------------

def test_mock_is_deterministic(biorxiv):
    backend = MockCompletionBackend(biorxiv)
    rec = MetadataRecord(biorxiv, (0,) * 9)
    req = CompletionRequest(build_random_prompt(PromptPlan("metadata_only"), rec, biorxiv), seed=5)
    assert backend.complete(req) == MockCompletionBackend(biorxiv).complete(req)


def test_mock_plants_metadata(biorxiv):
    backend = MockCompletionBackend(biorxiv)
    values = {a.name: a.options[0] for a in biorxiv.attributes}
    values["primary_research_area"] = "Genetics"
    rec = validate_record(biorxiv, values)
    text = backend.complete(CompletionRequest(build_random_prompt(PromptPlan("metadata_only"), rec, biorxiv), seed=0))
    assert "Genetics" in text
    planted = parse_tokens(text)
    assert all(planted[a.name] == values[a.name] for a in biorxiv.extracted)


def test_mock_plain_prompt_uses_prior(biorxiv):
    backend = MockCompletionBackend(biorxiv)
    text = backend.complete(CompletionRequest(build_random_prompt(PromptPlan("plain"), None, biorxiv), seed=0))
    assert set(parse_tokens(text)) == {a.name for a in biorxiv.extracted}


def test_mock_variation(biorxiv):
    text = mock_corpus(skewed_table(biorxiv, 1, 0), MockCompletionBackend(biorxiv).background_vocab, 0)[0]
    still = MockCompletionBackend(biorxiv, p_drift=0.0)
    for s in range(20):
        out = still.complete(CompletionRequest(build_variation_prompt(text), seed=s))
        assert parse_tokens(out) == parse_tokens(text)
    drifty = MockCompletionBackend(biorxiv, p_drift=1.0)
    changed = sum(parse_tokens(drifty.complete(CompletionRequest(build_variation_prompt(text), seed=s)))
                  != parse_tokens(text) for s in range(50))
    assert changed > 25


def test_mock_rejects_unknown_prompt(biorxiv):
    with pytest.raises(BackendError):
        MockCompletionBackend(biorxiv).complete(CompletionRequest("hello there"))
    with pytest.raises(InvalidArgumentError):
        MockCompletionBackend(biorxiv, p_drift=1.5)


def test_mock_tokens_roundtrip():
    assert parse_tokens(encode_token("area", "Cell Biology") + " x") == {"area": "Cell Biology"}


def test_skewed_table_is_skewed(biorxiv):
    table = skewed_table(biorxiv, 2000, 0)
    p = project_marginal(table, (0,)) / 2000
    assert p.max() > 0.5
    again = skewed_table(biorxiv, 2000, 0, sample_seed=1)
    assert np.argmax(project_marginal(again, (0,))) == np.argmax(p)


def test_recording_backend(biorxiv):
    rec = RecordingBackend(MockCompletionBackend(biorxiv))
    rec.complete(CompletionRequest(build_random_prompt(PromptPlan("plain"), None, biorxiv), seed=1))
    assert len(rec.prompts) == 1 and "### New" in rec.prompts[0]


# ---- retry policy --------------------------------------------------------------------

def test_with_retries_backoff():
    calls, sleeps = [], []

    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise RetryableBackendError("try again")
        return "ok"

    policy = BackendPolicy(max_retries=3, initial_delay=0.1, multiplier=3.0)
    assert with_retries(flaky, policy, sleeps.append) == "ok"
    assert sleeps == pytest.approx([0.1, 0.3])


def test_with_retries_exhausted():
    sleeps = []

    def always():
        raise RetryableBackendError("down")

    with pytest.raises(BackendError) as err:
        with_retries(always, BackendPolicy(max_retries=2, initial_delay=1.0), sleeps.append)
    assert not isinstance(err.value, RetryableBackendError)
    assert len(sleeps) == 2


def test_non_retryable_is_not_retried():
    calls = []

    def hard():
        calls.append(1)
        raise BackendError("bad request")

    with pytest.raises(BackendError):
        with_retries(hard, BackendPolicy(max_retries=5), lambda s: None)
    assert len(calls) == 1


def test_policy_validation():
    with pytest.raises(InvalidArgumentError):
        BackendPolicy(max_retries=-1)
    with pytest.raises(InvalidArgumentError):
        BackendPolicy(max_concurrency=0)
    with pytest.raises(InvalidArgumentError):
        CompletionRequest("p", max_tokens=0)


def test_map_ordered_keeps_order():
    assert map_ordered(lambda x: x * x, range(20), max_workers=4) == [x * x for x in range(20)]


# ---- HTTP client against a local stub server ----------------------------------------------

class _Stub:
    """Scripted OpenAI-compatible server: each POST pops the next (status, body) or uses the default."""

    def __init__(self):
        self.script = []
        self.default = (200, {"choices": [{"message": {"role": "assistant", "content": "canned body"}}]})
        self.requests = []
        self.delay = 0.0
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()


@pytest.fixture
def stub():
    state = _Stub()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            with state.lock:
                state.requests.append((self.path, dict(self.headers), body))
                state.active += 1
                state.peak = max(state.peak, state.active)
                status, payload = state.script.pop(0) if state.script else state.default
            time.sleep(state.delay)
            if self.path == "/embeddings" and status == 200 and payload is state.default[1]:
                payload = {"data": [{"embedding": [float(len(t)), 1.0, 0.0]} for t in body["input"]]}
            raw = payload.encode() if isinstance(payload, str) else json.dumps(payload).encode()
            with state.lock:
                state.active -= 1
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.url = f"http://127.0.0.1:{server.server_address[1]}"
    yield state
    server.shutdown()
    server.server_close()


def _config(stub, **policy):
    return HttpConfig("test-model", stub.url, "secret-key", BackendPolicy(**{"initial_delay": 0.0, **policy}))


def test_http_completion_canned(stub):
    backend = HttpCompletionBackend(_config(stub))
    assert backend.complete(CompletionRequest("hello", max_tokens=7, temperature=0.5, seed=2**40 + 3)) == "canned body"
    path, headers, body = stub.requests[0]
    assert path == "/chat/completions"
    assert headers["Authorization"] == "Bearer secret-key"
    assert body["model"] == "test-model" and body["messages"][0]["content"] == "hello"
    assert body["max_tokens"] == 7 and body["seed"] == (2**40 + 3) % 2**31


def test_http_retries_500(stub):
    stub.script = [(500, {"error": "x"}), (500, {"error": "x"})]
    sleeps = []
    backend = HttpCompletionBackend(_config(stub, max_retries=2), sleep=sleeps.append)
    assert backend.complete(CompletionRequest("hi")) == "canned body"
    assert len(stub.requests) == 3 and len(sleeps) == 2


def test_http_retries_exhausted(stub):
    stub.script = [(503, {})] * 3
    backend = HttpCompletionBackend(_config(stub, max_retries=2), sleep=lambda s: None)
    with pytest.raises(BackendError):
        backend.complete(CompletionRequest("hi"))
    assert len(stub.requests) == 3


@pytest.mark.parametrize("bad", ["not json at all", {"choices": []}, {"choices": [{"message": {"content": "  "}}]}])
def test_http_malformed_is_retryable(stub, bad):
    stub.script = [(200, bad)]
    backend = HttpCompletionBackend(_config(stub, max_retries=1), sleep=lambda s: None)
    assert backend.complete(CompletionRequest("hi")) == "canned body"


def test_http_embeddings(stub):
    backend = HttpEmbeddingBackend(_config(stub), batch_size=2)
    vecs = backend.embed(["a", "bbb", "cc"])
    assert vecs.shape == (3, 3)
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)
    assert [p for p, _, _ in stub.requests] == ["/embeddings", "/embeddings"]
    with pytest.raises(BackendError):
        backend.embed(["ok", ""])


def test_http_concurrency_bound(stub):
    stub.delay = 0.05
    backend = HttpCompletionBackend(_config(stub, max_concurrency=3))
    out = map_ordered(lambda i: backend.complete(CompletionRequest(f"p{i}")), range(16), max_workers=10)
    assert out == ["canned body"] * 16
    assert backend.peak_in_flight <= 3 and stub.peak <= 3
    assert stub.peak >= 2


def test_http_needs_base_url(monkeypatch):
    monkeypatch.delenv("MAPLE_API_BASE", raising=False)
    with pytest.raises(ConfigError):
        HttpCompletionBackend(HttpConfig("m"))


def test_http_env_base_url(monkeypatch, stub):
    monkeypatch.setenv("MAPLE_API_BASE", stub.url)
    monkeypatch.setenv("MAPLE_API_KEY", "from-env")
    backend = HttpCompletionBackend(HttpConfig("m"))
    backend.complete(CompletionRequest("hi"))
    assert stub.requests[0][1]["Authorization"] == "Bearer from-env"


def test_audit_log_redacts(stub, caplog):
    backend = HttpCompletionBackend(_config(stub))
    secret = "a private sentence that must not reach the logs"
    with caplog.at_level("INFO", logger="maple.audit"):
        backend.complete(CompletionRequest(secret))
    assert caplog.records and secret not in caplog.text
    assert "test-model" in caplog.text
