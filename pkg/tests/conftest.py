from __future__ import annotations

import itertools
import json
import shutil
import sys
from pathlib import Path

import pytest

from backforth import gateway
from backforth.config import parse_config
from backforth.mock import ScriptedMock

FIXTURES = Path(__file__).parent / "fixtures"
SCORE5_DOCS = 40  # doc numbers ending in 0 or 5 are scripted "Score: 5"
SEEDS_KEPT = 3

_names = itertools.count()


@pytest.fixture(autouse=True)
def no_backoff_sleep(monkeypatch):
    monkeypatch.setattr(gateway, "_sleep", lambda s: None)


@pytest.fixture
def mock_endpoint():
    """Register a ScriptedMock under a fresh mock:// name and return (endpoint_factory, cleanup)."""
    registered = []

    def make(mock: ScriptedMock, **kw) -> gateway.EndpointConfig:
        name = f"test-{next(_names)}"
        gateway.register_mock(name, mock)
        registered.append(name)
        kw.setdefault("max_retries", 3)
        kw.setdefault("backoff_base_seconds", 0.0)
        return gateway.EndpointConfig(base_url=f"mock://{name}", model_name="m", **kw)

    yield make
    for name in registered:
        gateway.unregister_mock(name)


def fixture_mocks() -> dict[str, ScriptedMock]:
    return {role: ScriptedMock.from_file(FIXTURES / f"mock_{role}.json") for role in ("backward", "forward", "rewriter")}


@pytest.fixture
def pipeline_env(tmp_path):
    """A run directory with the 200-doc corpus and fresh in-process mocks for every role.

    Returns ``(make_config, mocks)`` where ``make_config(**overrides)`` builds a
    PipelineConfig rooted in ``tmp_path``.
    """
    shutil.copy(FIXTURES / "corpus200.jsonl", tmp_path / "corpus.jsonl")
    shutil.copy(FIXTURES / "seed_trees.jsonl", tmp_path / "seeds.jsonl")
    mocks = fixture_mocks()
    names = {}
    for role, mock in mocks.items():
        names[role] = f"pipe-{role}-{next(_names)}"
        gateway.register_mock(names[role], mock)

    def make_config(stages=None, run_dir="run", **sections):
        raw = {
            "corpus": {"path": "corpus.jsonl", "max_tokens": 3584},
            "endpoints": {
                role: {"base_url": f"mock://{names[role]}", "model_name": role, "max_concurrency": 4, "backoff_base_seconds": 0.0}
                for role in mocks
            },
            "stages": stages or {"filtering": True, "rewriting": True, "distilling": True},
            "paths": {"ledger": f"{run_dir}/ledger.jsonl", "output_dir": run_dir},
            "seed_data": {"path": "seeds.jsonl"},
            "analysis": {"mauve_repeats": 2},
        }
        raw.update(sections)
        return parse_config(raw, base_dir=tmp_path)

    yield make_config, mocks
    for name in names.values():
        gateway.unregister_mock(name)


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
