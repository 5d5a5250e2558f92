"""Character 3-gram feature hashing: a deterministic, model-free text embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix(x: np.ndarray, seed: int) -> np.ndarray:
    """splitmix64 finalizer, vectorized; wraps modulo 2**64 by design."""
    with np.errstate(over="ignore"):
        z = x + np.uint64((0x9E3779B97F4A7C15 * (seed + 1)) & 0xFFFFFFFFFFFFFFFF)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class HashEmbedder:
    dim: int = 256
    n: int = 3
    seed: int = 0

    def ngram_ids(self, text: str) -> np.ndarray:
        # a leading and trailing space make 1- and 2-character texts produce a gram
        codes = np.frombuffer((" " + text + " ").encode("utf-32-le"), dtype=np.uint32).astype(np.uint64)
        if len(codes) < self.n:
            return np.zeros(0, dtype=np.uint64)
        ids = np.zeros(len(codes) - self.n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            for j in range(self.n):
                ids = ids * np.uint64(0x110000) + codes[j: len(codes) - self.n + 1 + j]
        return ids

    def buckets(self, text: str) -> np.ndarray:
        """Hash bucket of every character n-gram of ``text``."""
        return (_mix(self.ngram_ids(text), self.seed) % np.uint64(self.dim)).astype(np.int64)

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.bincount(self.buckets(text), minlength=self.dim).astype(float)
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec[0] = 1.0
            return vec
        return vec / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not len(texts):
            return np.zeros((0, self.dim))
        return np.stack([self.embed_one(t) for t in texts])


def hash_embed(texts: Sequence[str], dim: int = 256, seed: int = 0) -> np.ndarray:
    return HashEmbedder(dim=dim, seed=seed).embed(texts)
