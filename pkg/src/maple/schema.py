"""Categorical metadata schemas, records and tables.

A schema is an ordered list of attributes, each with a fixed, ordered option list.
Records store option *indices*; the option order defines a mixed-radix encoding
(first attribute most significant) used for contingency tables.

Numeric attributes such as a word count are represented by bucket labels. Such
attributes are ``derived``: their value is computed from the text itself rather
than asked of an annotator.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import InvalidArgumentError, SchemaValidationError

_WORD = re.compile(r"\S+")


@dataclass(frozen=True)
class AttributeDomain:
    name: str
    options: tuple[str, ...]
    description: str = ""
    # bucket lower edges for derived numeric attributes; options are their labels
    bucket_edges: tuple[float, ...] | None = None
    derived: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) < 2:
            raise InvalidArgumentError(f"attribute {self.name!r} needs at least 2 options")
        if len(set(self.options)) != len(self.options):
            raise InvalidArgumentError(f"attribute {self.name!r} has duplicate options")
        if self.bucket_edges is not None:
            object.__setattr__(self, "bucket_edges", tuple(float(e) for e in self.bucket_edges))
            if len(self.bucket_edges) != len(self.options):
                raise InvalidArgumentError(f"attribute {self.name!r}: one bucket edge per option required")

    @property
    def size(self) -> int:
        return len(self.options)

    def index(self, option: str) -> int:
        return self.options.index(option)

    @property
    def fallback(self) -> str | None:
        """The catch-all option used when no listed option fits, if the attribute has one."""
        return "Other" if "Other" in self.options else None

    def bucket_of(self, value: float) -> int:
        """Bucket index for a numeric value; out-of-range values clamp to the end buckets."""
        if self.bucket_edges is None:
            raise InvalidArgumentError(f"attribute {self.name!r} is not bucketed")
        idx = int(np.searchsorted(self.bucket_edges, value, side="right")) - 1
        return min(max(idx, 0), self.size - 1)

    def bucket_range(self, index: int) -> tuple[float, float]:
        """[low, high) word range of a bucket, using the spacing of the last two edges past the end."""
        edges = self.bucket_edges
        low = edges[index]
        high = edges[index + 1] if index + 1 < len(edges) else edges[-1] + (edges[-1] - edges[-2])
        return low, high


def bucketed_attribute(name: str, start: float, stop: float, width: float, derived: str | None = None,
                       description: str = "") -> AttributeDomain:
    edges = np.arange(start, stop, width)
    labels = [f"{int(lo)}-{int(lo + width - 1)}" for lo in edges]
    return AttributeDomain(name, tuple(labels), description, tuple(edges), derived)


@dataclass(frozen=True)
class MetadataSchema:
    attributes: tuple[AttributeDomain, ...]
    name: str = "schema"
    corpus_description: str = ""
    document_kind: str = "text"
    extraction: Mapping[str, str] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if not names:
            raise InvalidArgumentError("schema needs at least one attribute")
        if len(set(names)) != len(names):
            raise InvalidArgumentError("attribute names must be unique")

    def __len__(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.attributes)

    @property
    def total_size(self) -> int:
        return int(np.prod(self.sizes, dtype=object))

    def attribute(self, name: str) -> AttributeDomain:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        raise KeyError(name)

    def position(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, names: Sequence[str]) -> "MetadataSchema":
        """Schema restricted to ``names``, keeping this schema's attribute order."""
        missing = set(names) - set(self.names)
        if missing:
            raise InvalidArgumentError(f"unknown attributes {sorted(missing)}")
        keep = tuple(a for a in self.attributes if a.name in set(names))
        return MetadataSchema(keep, f"{self.name}[{','.join(a.name for a in keep)}]",
                              self.corpus_description, self.document_kind, self.extraction)

    @property
    def extracted(self) -> list[AttributeDomain]:
        """Attributes an annotator must fill in (derived ones are computed locally)."""
        return [a for a in self.attributes if a.derived is None]


@dataclass(frozen=True)
class MetadataRecord:
    schema: MetadataSchema = field(repr=False)
    values: tuple[int, ...]

    def __post_init__(self):
        values = tuple(int(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if len(values) != len(self.schema):
            raise SchemaValidationError(None, f"record has {len(values)} values for {len(self.schema)} attributes")
        for attr, v in zip(self.schema.attributes, values):
            if not 0 <= v < attr.size:
                raise SchemaValidationError(attr.name, f"index {v} out of range")

    def as_dict(self) -> dict[str, str]:
        return {a.name: a.options[v] for a, v in zip(self.schema.attributes, self.values)}

    def __getitem__(self, name: str) -> str:
        return self.as_dict()[name]

    def restrict(self, schema: MetadataSchema) -> "MetadataRecord":
        """Project onto a subset schema sharing attribute definitions."""
        full = self.as_dict()
        return validate_record(schema, {name: full[name] for name in schema.names})


def validate_record(schema: MetadataSchema, raw: Mapping[str, str]) -> MetadataRecord:
    """Exact, case-sensitive conversion of an attribute -> option-string map into a record."""
    unknown = [key for key in raw if key not in schema.names]
    if unknown:
        raise SchemaValidationError(unknown[0], "not an attribute of the schema")
    values = []
    for attr in schema.attributes:
        if attr.name not in raw:
            raise SchemaValidationError(attr.name, "missing")
        value = raw[attr.name]
        if not isinstance(value, str) or value not in attr.options:
            raise SchemaValidationError(attr.name, f"{value!r} is not one of the listed options")
        values.append(attr.index(value))
    return MetadataRecord(schema, tuple(values))


def hamming_distance(a: MetadataRecord, b: MetadataRecord) -> int:
    if a.schema is not b.schema and a.schema != b.schema:
        raise InvalidArgumentError("records belong to different schemas")
    return sum(x != y for x, y in zip(a.values, b.values))


def record_to_index(schema: MetadataSchema, record: MetadataRecord | Sequence[int]) -> int:
    values = record.values if isinstance(record, MetadataRecord) else record
    index = 0
    for size, v in zip(schema.sizes, values):
        index = index * size + int(v)
    return index


def index_to_record(schema: MetadataSchema, index: int) -> MetadataRecord:
    if not 0 <= index < schema.total_size:
        raise InvalidArgumentError(f"index {index} outside the domain")
    values = []
    for size in reversed(schema.sizes):
        index, v = divmod(index, size)
        values.append(v)
    return MetadataRecord(schema, tuple(reversed(values)))


class MetadataTable:
    """Rows of a schema stored as an ``(n_rows, n_attributes)`` integer array."""

    def __init__(self, schema: MetadataSchema, rows: Iterable[MetadataRecord] | np.ndarray = ()):
        self.schema = schema
        if isinstance(rows, np.ndarray):
            data = np.asarray(rows, dtype=np.int64).reshape(-1, len(schema))
            if len(data) and ((data < 0).any() or (data >= np.array(schema.sizes)).any()):
                raise SchemaValidationError(None, "table contains out-of-range indices")
        else:
            recs = list(rows)
            for rec in recs:
                if rec.schema != schema:
                    raise SchemaValidationError(None, "row belongs to a different schema")
            data = np.array([r.values for r in recs], dtype=np.int64).reshape(-1, len(schema))
        self.data = data

    def __len__(self) -> int:
        return len(self.data)

    @property
    def rows(self) -> list[MetadataRecord]:
        return [MetadataRecord(self.schema, tuple(row)) for row in self.data]

    def restrict(self, schema: MetadataSchema) -> "MetadataTable":
        cols = [self.schema.position(name) for name in schema.names]
        return MetadataTable(schema, self.data[:, cols])

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.rows:
                fh.write(json.dumps(rec.as_dict(), ensure_ascii=False) + "\n")

    @classmethod
    def from_jsonl(cls, schema: MetadataSchema, path: str | Path) -> "MetadataTable":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append(validate_record(schema, json.loads(line)))
        return cls(schema, rows)


def project_marginal(table: MetadataTable, attrs: Sequence[int]) -> np.ndarray:
    """Contingency counts of ``table`` over the attribute positions ``attrs`` (flattened, mixed radix)."""
    attrs = list(attrs)
    if not attrs:
        raise InvalidArgumentError("marginal needs at least one attribute")
    if len(set(attrs)) != len(attrs) or attrs != sorted(attrs):
        raise InvalidArgumentError(f"attributes must be sorted and distinct, got {attrs}")
    sizes = [table.schema.sizes[i] for i in attrs]
    cells = int(np.prod(sizes))
    if len(table) == 0:
        return np.zeros(cells)
    flat = np.ravel_multi_index(tuple(table.data[:, i] for i in attrs), sizes)
    return np.bincount(flat, minlength=cells).astype(float)


def word_count(text: str) -> int:
    return len(_WORD.findall(text))


def derive_value(attr: AttributeDomain, text: str) -> str:
    """Compute a derived attribute's option from the raw text."""
    if attr.derived == "word_count":
        return attr.options[attr.bucket_of(word_count(text))]
    raise InvalidArgumentError(f"unknown derivation {attr.derived!r} for attribute {attr.name!r}")


def schema_from_dict(data: Mapping) -> MetadataSchema:
    attrs = []
    for spec in data["attributes"]:
        if "buckets" in spec:
            b = spec["buckets"]
            attrs.append(bucketed_attribute(spec["name"], b["start"], b["stop"], b["width"],
                                            spec.get("derived"), spec.get("description", "")))
        else:
            edges = spec.get("bucket_edges")
            attrs.append(AttributeDomain(spec["name"], tuple(str(o) for o in spec["options"]),
                                         spec.get("description", ""), None if edges is None else tuple(edges),
                                         spec.get("derived")))
    return MetadataSchema(tuple(attrs), data.get("name", "schema"), data.get("corpus_description", ""),
                          data.get("document_kind", "text"), dict(data.get("extraction", {})))


def schema_to_dict(schema: MetadataSchema) -> dict:
    attrs = []
    for a in schema.attributes:
        spec = {"name": a.name, "options": list(a.options)}
        if a.description:
            spec["description"] = a.description
        if a.bucket_edges is not None:
            spec["bucket_edges"] = list(a.bucket_edges)
        if a.derived:
            spec["derived"] = a.derived
        attrs.append(spec)
    return {"name": schema.name, "corpus_description": schema.corpus_description,
            "document_kind": schema.document_kind, "extraction": dict(schema.extraction), "attributes": attrs}


def load_schema(source: str | Path) -> MetadataSchema:
    """Load a schema from a YAML file, or by built-in name (``biorxiv``, ``openreview``)."""
    path = Path(source)
    if path.suffix in (".yaml", ".yml", ".json") and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        ref = resources.files("maple.data.schemas") / f"{source}.yaml"
        if not ref.is_file():
            raise InvalidArgumentError(f"no schema file or built-in schema named {source!r}")
        text = ref.read_text(encoding="utf-8")
    return schema_from_dict(yaml.safe_load(text))
