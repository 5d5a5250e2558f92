"""Prompt construction: in-context example selection and generation / variation prompts.

Wording lives in editable template files (``maple/data/templates``); this module only
assembles sections. A custom directory with the same file names can replace them.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .schema import MetadataRecord, MetadataSchema, hamming_distance, validate_record

MODES = ("plain", "metadata_only", "examples_only", "maple")
_SECTION = re.compile(r"^\[(\w+)\]\s*$", re.M)


@dataclass(frozen=True)
class DonatedPair:
    metadata: MetadataRecord
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise InvalidArgumentError("donated text must be nonempty")

    def restrict(self, schema: MetadataSchema) -> "DonatedPair":
        return DonatedPair(self.metadata.restrict(schema), self.text)


def donated_from_dicts(schema: MetadataSchema, rows: Sequence[dict]) -> list[DonatedPair]:
    return [DonatedPair(validate_record(schema, row["metadata"]), row["text"]) for row in rows]


@dataclass(frozen=True)
class Templates:
    generation: dict
    variation: str
    extraction: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "Templates":
        return _load_templates(None if directory is None else str(directory))


def _read(directory: str | None, name: str) -> str:
    if directory is None:
        return (resources.files("maple.data.templates") / name).read_text(encoding="utf-8")
    return (Path(directory) / name).read_text(encoding="utf-8")


def parse_sections(text: str) -> dict[str, str]:
    """Split a ``[name]``-headed template file into named sections (trailing newlines dropped)."""
    parts = _SECTION.split(text)
    return {parts[i]: parts[i + 1].strip("\n") for i in range(1, len(parts), 2)}


@lru_cache(maxsize=8)
def _load_templates(directory: str | None) -> Templates:
    gen = parse_sections(_read(directory, "generation.txt"))
    need = {"preamble", "examples_intro", "example", "example_text", "target", "target_plain",
            "instruction_metadata", "instruction_examples", "instruction_plain", "length"}
    missing = need - set(gen)
    if missing:
        raise InvalidArgumentError(f"generation template lacks sections {sorted(missing)}")
    return Templates(gen, _read(directory, "variation.txt"), _read(directory, "extraction.txt"))


@dataclass
class PromptPlan:
    mode: str
    k_incontext: int = 0
    donated: list[DonatedPair] = field(default_factory=list)
    # examples_only: the single uniform sample reused by every prompt
    fixed_examples: list[DonatedPair] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown prompt mode {self.mode!r}")
        if self.k_incontext < 0:
            raise InvalidArgumentError("k_incontext must be >= 0")
        if self.mode in ("plain", "metadata_only") and self.k_incontext != 0:
            raise InvalidArgumentError(f"mode {self.mode} takes no in-context examples")
        if self.mode == "examples_only" and self.fixed_examples is None:
            raise InvalidArgumentError("examples_only plans need fixed_examples; use PromptPlan.examples_only")

    @property
    def uses_metadata(self) -> bool:
        return self.mode in ("metadata_only", "maple")

    @classmethod
    def examples_only(cls, donated: Sequence[DonatedPair], k: int, seed) -> "PromptPlan":
        donated = list(donated)
        k_eff = min(k, len(donated))
        idx = np.random.default_rng(seed).choice(len(donated), size=k_eff, replace=False) if k_eff else []
        return cls("examples_only", k, donated, [donated[i] for i in sorted(idx)])


def select_incontext(target: MetadataRecord, donated: Sequence[DonatedPair], k: int) -> list[DonatedPair]:
    """The ``k`` donated pairs closest to ``target`` in Hamming distance, ordered by (distance, index)."""
    if k < 0:
        raise InvalidArgumentError("k must be >= 0")
    ranked = sorted(range(len(donated)), key=lambda i: (hamming_distance(target, donated[i].metadata), i))
    return [donated[i] for i in ranked[:k]]


def render_metadata(record: MetadataRecord) -> str:
    return json.dumps(record.as_dict(), ensure_ascii=False)


def _length_clause(templates: Templates, record: MetadataRecord | None) -> str:
    if record is None:
        return ""
    for attr, v in zip(record.schema.attributes, record.values):
        if attr.derived == "word_count" and attr.bucket_edges is not None:
            low, high = attr.bucket_range(v)
            return Template(templates.generation["length"]).substitute(low=int(low), high=int(high) - 1)
    return ""


def build_random_prompt(plan: PromptPlan, metadata: MetadataRecord | None, schema: MetadataSchema,
                        templates: Templates | None = None) -> str:
    """Compose a generation prompt: preamble, example blocks, target metadata, instruction."""
    t = templates or Templates.load()
    g = t.generation
    if plan.uses_metadata and metadata is None:
        raise InvalidArgumentError(f"mode {plan.mode} needs target metadata")
    if not plan.uses_metadata and metadata is not None:
        raise InvalidArgumentError(f"mode {plan.mode} takes no target metadata")
    kind = {"document_kind": schema.document_kind}

    if plan.mode == "maple":
        examples = select_incontext(metadata, plan.donated, plan.k_incontext)
    elif plan.mode == "examples_only":
        examples = list(plan.fixed_examples)
    else:
        examples = []

    parts = [Template(g["preamble"]).substitute(kind, corpus_description=schema.corpus_description)]
    if examples:
        block = g["example"] if plan.mode == "maple" else g["example_text"]
        parts.append(Template(g["examples_intro"]).substitute(kind))
        for i, ex in enumerate(examples, 1):
            parts.append(Template(block).substitute(index=i, metadata=render_metadata(ex.metadata), text=ex.text))
    if metadata is not None:
        parts.append(Template(g["target"]).substitute(kind, metadata=render_metadata(metadata)))
        instruction = g["instruction_metadata"]
    else:
        parts.append(Template(g["target_plain"]).substitute(kind))
        instruction = g["instruction_examples"] if examples else g["instruction_plain"]
    head = "\n\n".join(parts[:-1])
    return head + "\n\n" + parts[-1] + "\n" + Template(instruction).substitute(
        kind, length=_length_clause(t, metadata)) + "\n"


def build_variation_prompt(text: str, document_kind: str = "text", templates: Templates | None = None) -> str:
    if not text.strip():
        raise InvalidArgumentError("variation text must be nonempty")
    t = templates or Templates.load()
    return Template(t.variation).substitute(document_kind=document_kind, text=text,
                                            n_words=len(text.split()))


class PromptSource:
    """The i-th initialization prompt for a plan and an optional synthetic metadata table.

    In-context selection is cached per distinct metadata record.
    """

    def __init__(self, plan: PromptPlan, schema: MetadataSchema, metadata_rows: Sequence[MetadataRecord] | None = None,
                 templates: Templates | None = None):
        if plan.uses_metadata and metadata_rows is None:
            raise InvalidArgumentError(f"mode {plan.mode} needs synthetic metadata")
        self.plan = plan
        self.schema = schema
        self.rows = None if metadata_rows is None or not plan.uses_metadata else list(metadata_rows)
        self.templates = templates or Templates.load()
        self._cache: dict[tuple, str] = {}

    def __call__(self, i: int) -> str:
        if self.rows is None:
            key = ()
            meta = None
        else:
            meta = self.rows[i % len(self.rows)]
            key = meta.values
        if key not in self._cache:
            self._cache[key] = build_random_prompt(self.plan, meta, self.schema, self.templates)
        return self._cache[key]
