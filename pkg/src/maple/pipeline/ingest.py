"""JSONL ingestion for private texts and donated (metadata, text) pairs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

from ..errors import ConfigError


class IngestError(ConfigError):
    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = str(path)
        self.problems = problems
        lines = ", ".join(f"line {n}: {why}" for n, why in problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        super().__init__(f"{path}: {len(problems)} malformed line(s): {lines}{more}")

    @property
    def line_numbers(self) -> list[int]:
        return [n for n, _ in self.problems]


def ingest_jsonl(path: str | Path, donated: bool = False) -> list:
    """Texts (or ``{"metadata", "text"}`` dicts when ``donated``) in file order.

    Every line is checked before anything is returned; all offending line numbers
    (1-based) are reported together. Blank lines are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    out, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append((n, f"invalid JSON ({exc.msg})"))
                continue
            if not isinstance(obj, dict):
                problems.append((n, "not a JSON object"))
                continue
            text = obj.get("text")
            if not isinstance(text, str) or not text.strip():
                problems.append((n, 'missing or empty "text"'))
                continue
            if donated:
                if not isinstance(obj.get("metadata"), dict):
                    problems.append((n, 'missing "metadata" object'))
                    continue
                out.append({"metadata": obj["metadata"], "text": text})
            else:
                out.append(text)
    if problems:
        raise IngestError(path, problems)
    return out


def write_jsonl(path: str | Path, rows: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def write_texts(path: str | Path, texts: Iterable[str]) -> None:
    write_jsonl(path, ({"text": t} for t in texts))


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
