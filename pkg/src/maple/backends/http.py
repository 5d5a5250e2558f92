"""Client for OpenAI-compatible chat-completion and embedding endpoints."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Sequence

import httpx
import numpy as np

from ..errors import BackendError, ConfigError, RetryableBackendError
from .base import BackendPolicy, CompletionRequest, normalize_rows, with_retries

log = logging.getLogger(__name__)
audit = logging.getLogger("maple.audit")

ENV_BASE_URL = "MAPLE_API_BASE"
ENV_API_KEY = "MAPLE_API_KEY"


@dataclass
class HttpConfig:
    model: str
    base_url: str | None = None
    api_key: str | None = None
    policy: BackendPolicy = field(default_factory=BackendPolicy)
    redact_text: bool = True

    def resolved(self) -> tuple[str, str | None]:
        base = self.base_url or os.environ.get(ENV_BASE_URL)
        if not base:
            raise ConfigError(f"no base URL configured; set {ENV_BASE_URL} or backend.base_url")
        return base.rstrip("/"), self.api_key or os.environ.get(ENV_API_KEY)


def _redact(obj, enabled: bool):
    """Copy of a request/response body with every string longer than 16 chars masked."""
    if not enabled:
        return obj
    if isinstance(obj, str):
        return obj if len(obj) <= 16 else f"<{len(obj)} chars>"
    if isinstance(obj, list):
        return [_redact(v, enabled) for v in obj]
    if isinstance(obj, dict):
        return {k: (v if k in ("model", "role") else _redact(v, enabled)) for k, v in obj.items()}
    return obj


class _HttpBase:
    def __init__(self, config: HttpConfig, client: httpx.Client | None = None, sleep=None):
        self.config = config
        self.base_url, api_key = config.resolved()
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(headers=headers, timeout=config.policy.timeout)
        self._slots = threading.BoundedSemaphore(config.policy.max_concurrency)
        self._sleep = sleep
        self.in_flight = 0
        self.peak_in_flight = 0
        self._count_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.base_url}{path}"
        audit.info("request %s %s", path, json.dumps(_redact(body, self.config.redact_text)))
        with self._slots:
            with self._count_lock:
                self.in_flight += 1
                self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                resp = self._client.post(url, json=body)
            except httpx.HTTPError as exc:
                raise RetryableBackendError(f"{type(exc).__name__}: {exc}") from exc
            finally:
                with self._count_lock:
                    self.in_flight -= 1
        if resp.status_code != 200:
            raise RetryableBackendError(f"HTTP {resp.status_code} from {path}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise RetryableBackendError(f"malformed JSON body from {path}") from exc
        audit.info("response %s %s", path, json.dumps(_redact(data, self.config.redact_text)))
        return data

    def _call(self, fn, what: str):
        kwargs = {} if self._sleep is None else {"sleep": self._sleep}
        return with_retries(fn, self.config.policy, what=what, **kwargs)


class HttpCompletionBackend(_HttpBase):
    def complete(self, request: CompletionRequest) -> str:
        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if request.seed is not None:
            body["seed"] = int(request.seed) % 2**31

        def once() -> str:
            data = self._post("/chat/completions", body)
            try:
                content = data["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise RetryableBackendError("response lacks choices[0].message.content") from exc
            if not isinstance(content, str) or not content.strip():
                raise RetryableBackendError("empty completion")
            return content

        return self._call(once, "completion")


class HttpEmbeddingBackend(_HttpBase):
    def __init__(self, config: HttpConfig, client: httpx.Client | None = None, sleep=None, batch_size: int = 64):
        super().__init__(config, client, sleep)
        self.batch_size = batch_size

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if any(not t for t in texts):
            raise BackendError("cannot embed an empty text")
        out = []
        for start in range(0, len(texts), self.batch_size):
            batch = texts[start: start + self.batch_size]
            out.append(self._call(lambda b=batch: self._embed_batch(b), "embedding"))
        if not out:
            return np.zeros((0, 0))
        return normalize_rows(np.vstack(out))

    def _embed_batch(self, batch: list[str]) -> np.ndarray:
        data = self._post("/embeddings", {"model": self.config.model, "input": batch})
        try:
            rows = [item["embedding"] for item in data["data"]]
            arr = np.asarray(rows, dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise RetryableBackendError("malformed embedding response") from exc
        if arr.ndim != 2 or len(arr) != len(batch):
            raise RetryableBackendError(f"expected {len(batch)} embeddings, got shape {arr.shape}")
        return arr
