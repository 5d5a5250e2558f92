"""Completion and embedding backends: an HTTP client plus deterministic mock backends."""

from .base import (
    BackendPolicy,
    CompletionBackend,
    CompletionRequest,
    EmbeddingBackend,
    RecordingBackend,
    map_ordered,
    with_retries,
)
from .hashing import HashEmbedder, hash_embed
from .http import HttpCompletionBackend, HttpConfig, HttpEmbeddingBackend
from .mock import MockCompletionBackend, mock_corpus, skewed_table

__all__ = [
    "BackendPolicy", "CompletionBackend", "CompletionRequest", "EmbeddingBackend", "HashEmbedder",
    "HttpCompletionBackend", "HttpConfig", "HttpEmbeddingBackend", "MockCompletionBackend",
    "RecordingBackend", "hash_embed", "map_ordered", "mock_corpus", "skewed_table", "with_retries",
]
