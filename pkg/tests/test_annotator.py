import itertools
import json

import pytest

from maple.annotator import annotate_corpus, annotate_one, build_extraction_prompt, parse_annotation
from maple.backends import MockCompletionBackend
from maple.backends.mock import encode_token
from maple.errors import BackendError, InvalidArgumentError
from maple.schema import MetadataRecord, index_to_record


def test_extraction_prompt(biorxiv):
    text = "We sequenced 40 zebrafish genomes and found a new enhancer."
    p = build_extraction_prompt(biorxiv, text)
    assert "CRITICAL INSTRUCTION 1" in p and text in p
    for attr in biorxiv.extracted:
        assert f'"{attr.name}": "<{"|".join(attr.options)}>"' in p
    # the derived length bucket is computed from the text, never asked for
    assert '"word_count"' not in p


def test_extraction_prompt_weak_schema(biorxiv):
    weak = biorxiv.subset(["primary_research_area", "model_organism"])
    p = build_extraction_prompt(weak, "some abstract")
    skeleton = [line for line in p.splitlines() if line.strip().startswith('"') and '": "<' in line]
    assert [line.split('"')[1] for line in skeleton] == ["primary_research_area", "model_organism"]


def test_extraction_prompt_empty_text(biorxiv):
    with pytest.raises(InvalidArgumentError):
        build_extraction_prompt(biorxiv, "  ")


def _record_json(record):
    return json.dumps({k: v for k, v in record.as_dict().items()})


class TestParse:
    def test_exact(self, toy_schema):
        rec = MetadataRecord(toy_schema, (2, 1, 0))
        result = parse_annotation(_record_json(rec), toy_schema)
        assert result.status == "ok" and result.record == rec

    def test_fenced(self, toy_schema):
        rec = MetadataRecord(toy_schema, (0, 0, 1))
        result = parse_annotation("Here you go:\n```json\n" + _record_json(rec) + "\n```", toy_schema)
        assert result.status == "ok" and result.record == rec

    def test_case_repair(self, toy_schema):
        result = parse_annotation('{"color": " RED ", "size": "small", "shape": "flat"}', toy_schema)
        assert result.status == "repaired"
        assert result.record.as_dict()["color"] == "red"

    def test_other_fallback(self, toy_schema):
        result = parse_annotation('{"color": "red", "size": "small", "shape": "hexagonal"}', toy_schema)
        assert result.status == "repaired" and result.record.as_dict()["shape"] == "Other"

    def test_no_fallback_fails(self, toy_schema):
        result = parse_annotation('{"color": "purple", "size": "small", "shape": "flat"}', toy_schema)
        assert result.status == "failed" and "color" in result.failure_reason

    def test_missing_attribute_without_fallback(self, toy_schema):
        result = parse_annotation('{"color": "red", "shape": "flat"}', toy_schema)
        assert result.status == "failed"

    def test_unknown_key_dropped(self, toy_schema):
        result = parse_annotation('{"color": "red", "size": "small", "shape": "flat", "mood": "x"}', toy_schema)
        assert result.status == "repaired" and any("mood" in r for r in result.repairs)

    def test_garbage(self, toy_schema):
        result = parse_annotation("I cannot help with that.", toy_schema)
        assert result.status == "failed" and result.failure_reason == "no-json"

    def test_braces_inside_strings(self, toy_schema):
        body = 'note {not json} then {"color": "blue", "size": "large", "shape": "round", "x": "a}b"}'
        assert parse_annotation(body, toy_schema).record.as_dict()["color"] == "blue"

    def test_derived_from_text(self, biorxiv):
        raw = {a.name: a.options[0] for a in biorxiv.extracted}
        text = "word " * 130
        rec = parse_annotation(json.dumps(raw), biorxiv, text).record
        assert rec["word_count"] == biorxiv.attribute("word_count").options[
            biorxiv.attribute("word_count").bucket_of(130)]

    def test_identity_exhaustive(self, toy_schema):
        for i in range(toy_schema.total_size):
            rec = index_to_record(toy_schema, i)
            result = parse_annotation(_record_json(rec), toy_schema)
            assert result.status == "ok" and result.record == rec


class _Scripted:
    def __init__(self, responses):
        self.responses = responses
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        r = self.responses(request)
        if isinstance(r, Exception):
            raise r
        return r


def _mock_text(schema, rec):
    return " ".join(encode_token(k, v) for k, v in rec.as_dict().items()) + " filler words here"


def test_annotate_corpus_all_valid(toy_schema):
    backend = MockCompletionBackend(toy_schema)
    recs = [index_to_record(toy_schema, i) for i in range(10)]
    table, results = annotate_corpus([_mock_text(toy_schema, r) for r in recs], backend, toy_schema)
    assert len(table) == 10 and [r.record for r in results] == recs


def test_annotate_corpus_one_garbage(toy_schema):
    recs = [index_to_record(toy_schema, i) for i in range(5)]
    texts = [_mock_text(toy_schema, r) for r in recs]
    mock = MockCompletionBackend(toy_schema)

    def respond(req):
        return "garbage" if texts[2] in req.prompt else mock.complete(req)

    table, results = annotate_corpus(texts, _Scripted(respond), toy_schema, max_concurrency=1)
    assert len(table) == 4
    assert [r.status for r in results].count("failed") == 1 and results[2].status == "failed"


def test_annotate_corpus_empty(toy_schema):
    table, results = annotate_corpus([], MockCompletionBackend(toy_schema), toy_schema)
    assert len(table) == 0 and results == []


def test_annotate_one_retries_then_gives_up(toy_schema):
    backend = _Scripted(lambda req: "nope")
    result = annotate_one("text", backend, toy_schema, max_retries=2)
    assert result.status == "failed" and backend.calls == 3


def test_annotate_one_recovers_after_backend_error(toy_schema):
    rec = index_to_record(toy_schema, 3)
    answers = iter([BackendError("down"), _record_json(rec)])
    result = annotate_one("text", _Scripted(lambda req: next(answers)), toy_schema)
    assert result.status == "ok" and result.record == rec


def test_mock_roundtrip_two_attribute_exhaustive(biorxiv):
    weak = biorxiv.subset(["research_focus_scale", "disease_mention"])
    backend = MockCompletionBackend(weak)
    for values in itertools.product(*(range(s) for s in weak.sizes)):
        rec = MetadataRecord(weak, values)
        assert annotate_one(_mock_text(weak, rec), backend, weak).record == rec
