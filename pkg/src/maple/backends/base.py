"""Backend interfaces, request types and the shared retry / concurrency policy."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence, TypeVar

import numpy as np

from ..errors import BackendError, InvalidArgumentError, RetryableBackendError

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise InvalidArgumentError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise InvalidArgumentError("temperature must be >= 0")


@dataclass(frozen=True)
class BackendPolicy:
    max_retries: int = 2
    initial_delay: float = 0.5
    multiplier: float = 2.0
    timeout: float = 60.0
    max_concurrency: int = 8

    def __post_init__(self):
        if self.max_retries < 0:
            raise InvalidArgumentError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise InvalidArgumentError("max_concurrency must be >= 1")
        if self.multiplier < 1:
            raise InvalidArgumentError("backoff multiplier must be >= 1")

    def delays(self) -> list[float]:
        """Sleep before each retry: initial_delay, initial_delay * multiplier, ..."""
        return [self.initial_delay * self.multiplier**i for i in range(self.max_retries)]


class CompletionBackend(Protocol):
    def complete(self, request: CompletionRequest) -> str: ...


class EmbeddingBackend(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def with_retries(fn: Callable[[], T], policy: BackendPolicy, sleep: Callable[[float], None] = time.sleep,
                 what: str = "request") -> T:
    """Call ``fn``, retrying :class:`RetryableBackendError` with multiplicative backoff."""
    delays = policy.delays()
    for attempt in range(policy.max_retries + 1):
        try:
            return fn()
        except RetryableBackendError as exc:
            if attempt == policy.max_retries:
                raise BackendError(f"{what} failed after {attempt + 1} attempts: {exc}") from exc
            log.warning("%s failed (%s); retry %d/%d in %.2fs", what, exc, attempt + 1,
                        policy.max_retries, delays[attempt])
            sleep(delays[attempt])
    raise AssertionError("unreachable")


def map_ordered(fn: Callable[[T], R], items: Iterable[T], max_workers: int = 1) -> list[R]:
    """Apply ``fn`` to every item with at most ``max_workers`` in flight; results keep input order."""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim != 2:
        raise InvalidArgumentError("expected a 2-d array of embeddings")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise BackendError("embedding backend returned a zero vector")
    return vectors / norms


@dataclass
class RecordingBackend:
    """Wraps a completion backend and keeps every request it forwards (prompt inspection)."""

    inner: CompletionBackend
    requests: list[CompletionRequest] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            self.requests.append(request)
        return self.inner.complete(request)

    @property
    def prompts(self) -> list[str]:
        return [r.prompt for r in self.requests]
