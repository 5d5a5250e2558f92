"""Metadata extraction with an LLM: prompt, parse and repair, batch annotation."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from string import Template
from typing import Sequence

from .backends.base import CompletionRequest, map_ordered
from .errors import BackendError, InvalidArgumentError
from .prompts import Templates
from .schema import MetadataRecord, MetadataSchema, MetadataTable, derive_value, validate_record

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.S)
DEFAULT_PERSONA = ("You are an expert information extraction assistant. Your task is to carefully read the "
                   "text and extract the specified features according to the schema provided.")


@dataclass
class AnnotationResult:
    record: MetadataRecord | None
    raw_response: str
    status: str  # ok | repaired | failed
    failure_reason: str | None = None
    repairs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"status": self.status, "failure_reason": self.failure_reason, "repairs": self.repairs,
                "record": None if self.record is None else self.record.as_dict(),
                "raw_response": self.raw_response}


def _schema_lines(schema: MetadataSchema) -> str:
    attrs = schema.extracted
    lines = []
    for i, attr in enumerate(attrs):
        comma = "," if i < len(attrs) - 1 else ""
        line = f'  "{attr.name}": "<{"|".join(attr.options)}>"{comma}'
        if attr.description:
            line += f" // {attr.description}"
        lines.append(line)
    return "\n".join(lines)


def build_extraction_prompt(schema: MetadataSchema, text: str, templates: Templates | None = None) -> str:
    if not text.strip():
        raise InvalidArgumentError("cannot annotate empty text")
    if not schema.extracted:
        raise InvalidArgumentError("schema has no attributes to extract")
    t = templates or Templates.load()
    ex = schema.extraction
    cross_attr = ex.get("cross_field_attribute")
    if cross_attr not in schema.names or schema.attribute(cross_attr).derived:
        cross_attr = schema.extracted[-1].name
    cross_opt = ex.get("cross_field_option")
    if cross_opt not in schema.attribute(cross_attr).options:
        cross_opt = schema.attribute(cross_attr).options[0]
    return Template(t.extraction).substitute(
        persona=ex.get("persona", DEFAULT_PERSONA),
        cross_field_option=cross_opt,
        cross_field_attribute=cross_attr,
        schema_lines=_schema_lines(schema),
        text_label=ex.get("text_label", "Text to analyze"),
        text=text,
    )


def _first_json_object(text: str) -> dict | None:
    """The first balanced ``{...}`` span that parses as a JSON object."""
    start = text.find("{")
    while start != -1:
        depth, in_str, esc = 0, False, False
        for j in range(start, len(text)):
            ch = text[j]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start: j + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    return None


def parse_annotation(response: str, schema: MetadataSchema, text: str | None = None) -> AnnotationResult:
    """Parse an extraction response, repairing what can be repaired.

    Derived attributes are computed from ``text`` when it is given; otherwise they are
    read from the response like any other attribute.
    """
    body = response
    fence = _FENCE.search(body)
    if fence:
        body = fence.group(1)
    obj = _first_json_object(body)
    if obj is None and body is not response:
        obj = _first_json_object(response)
    if obj is None:
        return AnnotationResult(None, response, "failed", "no-json")

    repairs: list[str] = []
    clean: dict[str, str] = {}
    for key in obj:
        if key not in schema.names:
            repairs.append(f"{key}: dropped unknown attribute")
    for attr in schema.attributes:
        if attr.derived is not None and text is not None:
            clean[attr.name] = derive_value(attr, text)
            continue
        value = obj.get(attr.name)
        if isinstance(value, str) and value in attr.options:
            clean[attr.name] = value
            continue
        folded = value.strip().casefold() if isinstance(value, str) else None
        match = next((o for o in attr.options if o.casefold() == folded), None) if folded is not None else None
        if match is not None:
            clean[attr.name] = match
            repairs.append(f"{attr.name}: {value!r} -> {match!r} (case/whitespace)")
        elif attr.fallback is not None:
            clean[attr.name] = attr.fallback
            repairs.append(f"{attr.name}: {'missing' if value is None else repr(value)} -> {attr.fallback!r}")
        else:
            why = "missing" if attr.name not in obj else f"{value!r} is not a listed option"
            return AnnotationResult(None, response, "failed", f"{attr.name}: {why}", repairs)
    record = validate_record(schema, clean)
    return AnnotationResult(record, response, "repaired" if repairs else "ok", None, repairs)


def annotate_one(text: str, backend, schema: MetadataSchema, max_retries: int = 2, max_tokens: int = 512,
                 templates: Templates | None = None) -> AnnotationResult:
    prompt = build_extraction_prompt(schema, text, templates)
    result = AnnotationResult(None, "", "failed", "not attempted")
    for attempt in range(max_retries + 1):
        try:
            response = backend.complete(CompletionRequest(prompt, max_tokens=max_tokens, temperature=0.0, seed=0))
        except BackendError as exc:
            result = AnnotationResult(None, "", "failed", f"backend: {exc}")
            continue
        result = parse_annotation(response, schema, text)
        if result.status != "failed":
            return result
        log.debug("annotation attempt %d failed: %s", attempt + 1, result.failure_reason)
    return result


def annotate_corpus(texts: Sequence[str], backend, schema: MetadataSchema, max_retries: int = 2,
                    max_concurrency: int = 4, max_tokens: int = 512,
                    templates: Templates | None = None) -> tuple[MetadataTable, list[AnnotationResult]]:
    """Annotate every text; failed ones are left out of the table but kept in the results."""
    templates = templates or Templates.load()
    results = map_ordered(lambda t: annotate_one(t, backend, schema, max_retries, max_tokens, templates),
                          texts, max_concurrency)
    failed = sum(r.status == "failed" for r in results)
    if failed:
        log.warning("%d of %d annotations failed", failed, len(results))
    table = MetadataTable(schema, [r.record for r in results if r.record is not None])
    return table, results


def write_annotation_log(results: Sequence[AnnotationResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, r in enumerate(results):
            fh.write(json.dumps({"index": i, **r.to_dict()}, ensure_ascii=False) + "\n")
