"""Deterministic mock LLM for desk-scale runs.

Mock texts carry their metadata as planted one-word tokens ``«attribute=Option_Name»``
(spaces inside options become underscores) followed by filler words. Filler cycles
through a small vocabulary from a random offset, so two texts with the same vocabulary
and length have nearly identical character statistics and the tokens dominate their
embedding differences.

The backend answers three prompt shapes produced by :mod:`maple.prompts` and
:mod:`maple.annotator`: extraction, generation (with or without metadata / examples)
and variation. Anything else is a hard error.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .._seeding import derive_seed
from ..errors import BackendError, InvalidArgumentError
from ..schema import MetadataSchema, MetadataTable, word_count
from .base import CompletionRequest

_TOKEN = re.compile(r"«([^=»\s]+)=([^»\s]*)»")
_SKELETON = re.compile(r'^\s*"([^"]+)": "<(.*)>",?(?: //.*)?$', re.M)
_EXAMPLE = re.compile(r"^### Example \d+\n(?:Metadata: ([^\n]*)\n)?Text: (.*?)(?=\n\n### |\Z)", re.M | re.S)
_TARGET = re.compile(r"^### New [^\n]*\n(?:Metadata: ([^\n]*)\n)?", re.M)
_LENGTH = re.compile(r"between (\d+) and (\d+) words")
_VARIATION = re.compile(r"\n<<<\n(.*)\n>>>\n", re.S)
_EXTRACTION_TEXT = re.compile(r"\*\*[^*\n]+:\*\*\n\n(.*)\n\n\*\*Your output \(JSON only\):\*\*", re.S)

_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "zi", "pa", "do", "fe", "gu", "hi", "ja",
              "be", "co", "du", "fi", "go", "ha", "ji", "ku", "le", "mo", "nu", "pe", "qi", "ro", "su"]


def encode_token(attribute: str, option: str) -> str:
    return f"«{attribute}={option.replace(' ', '_')}»"


def parse_tokens(text: str) -> dict[str, str]:
    """Planted ``attribute -> option`` pairs; the first occurrence of an attribute wins."""
    found: dict[str, str] = {}
    for name, value in _TOKEN.findall(text):
        found.setdefault(name, value.replace("_", " "))
    return found


def filler_words(text: str) -> list[str]:
    return [w for w in text.split() if not _TOKEN.fullmatch(w)]


def make_vocabulary(seed: int, size: int = 60) -> list[str]:
    """Pseudo-words built from syllables; distinct seeds give (almost surely) distinct vocabularies."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen = set()
    while len(words) < size:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 5))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def check_mock_schema(schema: MetadataSchema) -> None:
    for attr in schema.extracted:
        if "=" in attr.name or any(c.isspace() for c in attr.name):
            raise InvalidArgumentError(f"attribute name {attr.name!r} cannot be planted as a token")
        for opt in attr.options:
            if "_" in opt or "»" in opt or "«" in opt:
                raise InvalidArgumentError(f"option {opt!r} cannot be planted as a token")


def render_text(schema: MetadataSchema, values: Mapping[str, str], n_words: int, vocab: Sequence[str],
                rng: np.random.Generator, repeats: int = 3) -> str:
    """Exactly ``n_words`` words: the attribute tokens (schema order) repeated ``repeats`` times,
    spread evenly through cycled filler."""
    block = [encode_token(a.name, values[a.name]) for a in schema.extracted if a.name in values]
    reps = max(1, min(repeats, n_words // max(1, 2 * len(block)))) if block else 0
    tokens = block * reps
    n_fill = max(0, n_words - len(tokens))
    start = int(rng.integers(len(vocab)))
    fill = [vocab[(start + j) % len(vocab)] for j in range(n_fill)]
    if not tokens:
        return " ".join(fill)
    words: list[str] = []
    cuts = np.linspace(0, n_fill, len(tokens) + 1).astype(int)
    for i, tok in enumerate(tokens):
        words.append(tok)
        words.extend(fill[cuts[i]: cuts[i + 1]])
    return " ".join(words)


def _length_attr(schema: MetadataSchema):
    return next((a for a in schema.attributes if a.derived == "word_count"), None)


def zipf_probs(size: int, exponent: float) -> np.ndarray:
    p = 1.0 / np.arange(1, size + 1) ** exponent
    return p / p.sum()


@dataclass
class MockCompletionBackend:
    """Mock completion backend over a fixed world schema.

    ``prior_exponent`` shapes the data-independent "pre-training" prior: a Zipf law over
    each attribute's option order. ``p_drift`` is the chance that a variation swaps one
    attribute token for a uniformly random option.

    Generation fills attributes named in the target metadata verbatim. Every other
    attribute is imitated from a random in-context example among those agreeing best with
    the target metadata, except that with probability ``p_prior`` it comes from the prior.
    """

    schema: MetadataSchema
    p_drift: float = 0.1
    p_prior: float = 0.3
    prior_exponent: float = 1.0
    background_vocab: list[str] = field(default_factory=lambda: make_vocabulary(10_007))
    token_repeats: int = 3
    calls: int = 0

    def __post_init__(self):
        check_mock_schema(self.schema)
        for name in ("p_drift", "p_prior"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")
        self._length = _length_attr(self.schema)

    # ---- public API -------------------------------------------------------
    def complete(self, request: CompletionRequest) -> str:
        self.calls += 1
        prompt = request.prompt
        digest = int.from_bytes(hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest(), "little")
        rng = np.random.default_rng(derive_seed(request.seed or 0, digest))
        if "CRITICAL INSTRUCTION 1" in prompt:
            return self._extract(prompt)
        m = _VARIATION.search(prompt)
        if m:
            return self._vary(m.group(1), rng)
        if _TARGET.search(prompt):
            return self._generate(prompt, rng)
        raise BackendError("mock backend: unrecognized prompt shape")

    def prior_values(self, rng: np.random.Generator) -> dict[str, str]:
        return {a.name: a.options[rng.choice(a.size, p=zipf_probs(a.size, self.prior_exponent))]
                for a in self.schema.extracted}

    # ---- prompt kinds -----------------------------------------------------
    def _extract(self, prompt: str) -> str:
        m = _EXTRACTION_TEXT.search(prompt)
        if not m:
            raise BackendError("mock backend: extraction prompt without a text block")
        planted = parse_tokens(m.group(1))
        out = {}
        for name, options in _SKELETON.findall(prompt[: m.start()]):
            opts = options.split("|")
            value = planted.get(name)
            if value not in opts:
                value = "Other" if "Other" in opts else opts[-1]
            out[name] = value
        if not out:
            raise BackendError("mock backend: extraction prompt without a schema")
        return json.dumps(out, ensure_ascii=False)

    def _generate(self, prompt: str, rng: np.random.Generator) -> str:
        target = _TARGET.search(prompt)
        metadata = json.loads(target.group(1)) if target.group(1) else {}
        examples = [(json.loads(meta) if meta else {}, text) for meta, text in _EXAMPLE.findall(prompt)]
        source, best = None, []
        if examples:
            # imitate one of the examples that agree best with the requested metadata
            agree = [sum(meta.get(k) == v for k, v in metadata.items()) for meta, _ in examples]
            best = [ex for ex, a in zip(examples, agree) if a == max(agree)]
            source = best[int(rng.integers(len(best)))]

        values: dict[str, str] = {}
        prior = self.prior_values(rng)
        for attr in self.schema.extracted:
            if attr.name in metadata:
                values[attr.name] = metadata[attr.name]
            elif best and rng.random() >= self.p_prior:
                # each missing attribute is imitated from its own best-agreeing example
                meta, text = best[int(rng.integers(len(best)))]
                values[attr.name] = parse_tokens(text).get(attr.name, meta.get(attr.name, prior[attr.name]))
            else:
                values[attr.name] = prior[attr.name]

        n_words = self._target_length(prompt, source, rng)
        vocab = self.background_vocab
        if source is not None:
            vocab = list(dict.fromkeys(filler_words(source[1]))) or vocab
        return render_text(self.schema, values, n_words, vocab, rng, self.token_repeats)

    def _target_length(self, prompt: str, source, rng: np.random.Generator) -> int:
        m = _LENGTH.search(prompt)
        if m:
            return int(rng.integers(int(m.group(1)), int(m.group(2)) + 1))
        attr = self._length
        if source is not None:
            n = word_count(source[1])
            if attr is None:
                return n
            low, high = attr.bucket_range(attr.bucket_of(n))
            return int(rng.integers(int(low), int(high)))
        if attr is None:
            return int(rng.integers(50, 300))
        low, high = attr.bucket_range(int(rng.choice(attr.size, p=zipf_probs(attr.size, self.prior_exponent))))
        return int(rng.integers(int(low), int(high)))

    def _vary(self, text: str, rng: np.random.Generator) -> str:
        values = {k: v for k, v in parse_tokens(text).items() if k in self.schema.names}
        if values and rng.random() < self.p_drift:
            names = [a.name for a in self.schema.extracted]
            attr = self.schema.attribute(names[int(rng.integers(len(names)))])
            values[attr.name] = attr.options[int(rng.integers(attr.size))]
        vocab = list(dict.fromkeys(filler_words(text))) or self.background_vocab
        return render_text(self.schema, values, word_count(text), vocab, rng, self.token_repeats)


# ---- private-corpus helpers (test fixtures and demos) -------------------------

def skewed_table(schema: MetadataSchema, n: int, seed: int, exponent: float = 2.5,
                 coupling: float = 0.8, sample_seed: int | None = None, swaps: int | None = None) -> MetadataTable:
    """Rows from a skewed, correlated distribution unlike the mock prior.

    Each attribute follows a Zipf law over a seeded permutation of its options. With
    probability ``coupling`` an attribute instead copies a shifted version of the first
    attribute's rank, which correlates the columns. ``seed`` fixes the distribution and
    ``sample_seed`` (default: ``seed``) the draws. With ``swaps`` set, each order is the
    natural option order with that many random transpositions instead of a full shuffle.
    """
    perm_rng = np.random.default_rng(seed)
    perms = []
    for a in schema.attributes:
        if swaps is None:
            perms.append(perm_rng.permutation(a.size))
            continue
        order = np.arange(a.size)
        for _ in range(swaps):
            i, j = perm_rng.choice(a.size, size=2, replace=False)
            order[[i, j]] = order[[j, i]]
        perms.append(order)
    rng = np.random.default_rng([seed, seed if sample_seed is None else sample_seed])
    data = np.empty((n, len(schema)), dtype=np.int64)
    ranks0 = rng.choice(schema.sizes[0], size=n, p=zipf_probs(schema.sizes[0], exponent))
    data[:, 0] = perms[0][ranks0]
    for j in range(1, len(schema)):
        size = schema.sizes[j]
        ranks = rng.choice(size, size=n, p=zipf_probs(size, exponent))
        coupled = rng.random(n) < coupling
        ranks = np.where(coupled, ranks0 % size, ranks)
        data[:, j] = perms[j][ranks]
    return MetadataTable(schema, data)


def mock_corpus(table: MetadataTable, vocab: Sequence[str], seed: int, token_repeats: int = 3) -> list[str]:
    """Render every row of ``table`` as a mock text whose length falls in its word_count bucket."""
    schema = table.schema
    check_mock_schema(schema)
    length = _length_attr(schema)
    rng = np.random.default_rng(seed)
    texts = []
    for rec in table.rows:
        values = rec.as_dict()
        if length is not None:
            low, high = length.bucket_range(rec.values[schema.position(length.name)])
            n = int(rng.integers(int(low), int(high)))
        else:
            n = int(rng.integers(50, 300))
        texts.append(render_text(schema, values, n, vocab, rng, token_repeats))
    return texts
