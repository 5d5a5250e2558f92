import json
import sys

import numpy as np
import pytest

from maple.cli import main
from maple.schema import AttributeDomain, MetadataSchema, load_schema


@pytest.fixture(scope="session")
def biorxiv():
    return load_schema("biorxiv")


@pytest.fixture(scope="session")
def toy_schema():
    return MetadataSchema((
        AttributeDomain("color", ("red", "green", "blue")),
        AttributeDomain("size", ("small", "large")),
        AttributeDomain("shape", ("round", "square", "flat", "Other")),
    ), name="toy")


@pytest.fixture(scope="session")
def mock_data(tmp_path_factory):
    """A small mock private corpus, donated set and config.yaml written by the CLI."""
    out = tmp_path_factory.mktemp("mockdata")
    assert main(["mock-data", "--out", str(out), "--n-private", "300", "--n-donated", "50",
                 "--n-syn", "20", "--seed", "3"]) == 0
    return out


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def random_unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts survive output capture
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
