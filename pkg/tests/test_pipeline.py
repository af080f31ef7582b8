import json

import pytest

from backforth import gateway
from backforth.ledger import Ledger, replay
from backforth.mock import ScriptedMock
from backforth.pipeline import StageAborted, analyze, ledger_status, planned_stages, run_all, run_stage
from backforth.stages import Status

from conftest import SCORE5_DOCS, SEEDS_KEPT, read_jsonl


class Crash(BaseException):
    pass


def crash_at(stage_name, after_batches):
    seen = {"n": 0}

    def hook(stage, written):
        if stage == stage_name:
            seen["n"] += 1
            if seen["n"] == after_batches:
                raise Crash(f"{stage} after {written}")

    return hook


def test_ingest_counts(pipeline_env):
    make, mocks = pipeline_env
    cfg = make()
    with Ledger(cfg.paths.ledger, cfg.config_hash()) as led:
        s = run_stage(cfg, "ingest", led)
        assert s.processed == 200 and s.extra["read_count"] == 200 and s.extra["dropped_too_long"] == 0
        again = run_stage(cfg, "ingest", led)
        assert again.processed == 0 and again.skipped == 200


def test_length_filter_and_sampling(pipeline_env):
    make, _ = pipeline_env
    cfg = make(corpus={"path": "corpus.jsonl", "max_tokens": 18}, limits={"max_pairs": 5})
    with Ledger(cfg.paths.ledger, cfg.config_hash()) as led:
        s = run_stage(cfg, "ingest", led)
        assert s.processed <= 5
        assert s.extra["dropped_too_long"] + s.extra["kept_after_length_filter"] == 200
        assert all(p.status is Status.INGESTED for p in led.pairs())


def test_full_run(pipeline_env):
    make, mocks = pipeline_env
    cfg = make()
    manifest = run_all(cfg)
    assert manifest["status"] == "complete"
    assert mocks["backward"].calls == 200 and mocks["forward"].calls == 200
    # 40 rewrites, one retried, plus 40 distillations
    assert mocks["rewriter"].calls == SCORE5_DOCS * 2 + 1
    for variant in ("rewritten", "distilled"):
        rows = read_jsonl(manifest["datasets"][variant]["path"])
        assert len(rows) == SEEDS_KEPT + SCORE5_DOCS
        assert [r["source_tag"] for r in rows[:SEEDS_KEPT]] == ["seed_assistant"] * SEEDS_KEPT
    stages = manifest["stages"]
    assert stages["filter"]["extra"] == {"kept": 40, "filtered_out": 160}
    with open(manifest["analysis_report"], encoding="utf-8") as fh:
        report = json.load(fh)
    # doc numbers ending 4, 6, 7, 8, 9 score 2; ending 3 yields no parsable score
    assert report["score_histogram"]["counts"] == {"1": 0, "2": 100, "3": 20, "4": 20, "5": 40}
    assert report["score_histogram"]["invalid"] == 20
    assert set(report["mauve"]) == {"initial_vs_rewritten", "initial_vs_distilled", "rewritten_vs_distilled", "distilled_split"}

    _, live = replay(cfg.paths.ledger)
    assert live["doc-100"].payload.response_rewritten == "Rewritten answer for document 100 after retry."


def test_rerun_makes_no_calls(pipeline_env):
    make, mocks = pipeline_env
    cfg = make()
    run_all(cfg)
    before = {k: m.calls for k, m in mocks.items()}
    manifest = run_all(cfg)
    assert {k: m.calls for k, m in mocks.items()} == before
    assert manifest["stages"]["ingest"]["skipped"] == 200
    assert manifest["stages"]["backtranslate"]["processed"] == 0


@pytest.mark.parametrize("stage,batch", [("backtranslate", 1), ("backtranslate", 7), ("score", 3), ("rewrite", 1), ("distill", 2)])
def test_crash_and_resume_exactly_once(pipeline_env, stage, batch):
    make, mocks = pipeline_env
    cfg = make()
    with pytest.raises(Crash):
        run_all(cfg, on_checkpoint=crash_at(stage, batch))
    with open(f"{cfg.paths.output_dir}/manifest.json", encoding="utf-8") as fh:
        assert json.load(fh)["status"] == "failed"
    run_all(cfg)
    assert mocks["backward"].calls == 200
    assert mocks["forward"].calls == 200
    assert mocks["rewriter"].calls == SCORE5_DOCS * 2 + 1


def test_filtering_disabled(pipeline_env):
    make, mocks = pipeline_env
    cfg = make(stages={"filtering": False, "rewriting": False, "distilling": False})
    assert planned_stages(cfg) == ["ingest", "backtranslate", "build", "analyze"]
    manifest = run_all(cfg)
    assert mocks["forward"].calls == 0 and mocks["rewriter"].calls == 0
    assert manifest["datasets"]["initial"]["count"] == 200 + SEEDS_KEPT


def test_rewriting_without_filtering(pipeline_env):
    make, mocks = pipeline_env
    cfg = make(stages={"filtering": False, "rewriting": True, "distilling": False}, limits={"max_pairs": 10})
    run_all(cfg)
    assert mocks["forward"].calls == 0
    assert mocks["rewriter"].calls >= 10


def test_consecutive_failure_abort(pipeline_env):
    make, _ = pipeline_env
    gateway.register_mock("always-down", ScriptedMock(default={"fail": "server"}))
    try:
        cfg = make(
            endpoints={
                role: {"base_url": "mock://always-down", "max_retries": 0, "backoff_base_seconds": 0, "max_concurrency": 2}
                for role in ("backward", "forward", "rewriter")
            },
            limits={"consecutive_failure_threshold": 5, "batch_size": 4},
        )
        with pytest.raises(StageAborted):
            run_all(cfg)
        status = ledger_status(cfg.paths.ledger)
        assert status["records"] == 200 and status["by_status"] == {"ingested": 200}
        assert status["pending_retry"] == 8
    finally:
        gateway.unregister_mock("always-down")


def test_failed_records_retried_on_resume(pipeline_env):
    make, mocks = pipeline_env
    flaky = ScriptedMock([(r"Document DOC00[0-4]\.", [{"fail": "client"}, "What?"]), (".*", ["What now?"])])
    gateway.register_mock("flaky", flaky)
    try:
        cfg = make(
            endpoints={
                "backward": {"base_url": "mock://flaky", "backoff_base_seconds": 0},
                "forward": {"base_url": "mock://flaky", "backoff_base_seconds": 0},
                "rewriter": {"base_url": "mock://flaky", "backoff_base_seconds": 0},
            },
            stages={"filtering": False, "rewriting": False},
        )
        with Ledger(cfg.paths.ledger, cfg.config_hash()) as led:
            run_stage(cfg, "ingest", led)
            s = run_stage(cfg, "backtranslate", led)
            assert (s.succeeded, s.failed) == (195, 5)
            s = run_stage(cfg, "backtranslate", led)
            assert (s.processed, s.succeeded) == (5, 5)
            assert all(e.attempt_count == (2 if e.doc_id < "doc-005" else 1) for e in led)
    finally:
        gateway.unregister_mock("flaky")


def test_analyze_report_without_selection(pipeline_env):
    make, _ = pipeline_env
    cfg = make()
    report = analyze(cfg, [])
    assert report["pairs"] == {"total": 0, "selected": 0} and report["mauve"] == {}
