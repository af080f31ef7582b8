import json

import pytest

from backforth.dataset import (
    SEED_TAG,
    WEB_TAG,
    DatasetError,
    DatasetRecord,
    SeedPair,
    SourceTag,
    build_finetune_dataset,
    cap_instruction_length,
    emit_direction_training,
    export_jsonl,
    filter_score5,
    load_conversation_trees,
    mark_filtered,
    oasst_to_tree,
    prepare_seed_pairs,
    read_dataset,
)
from backforth.stages import CandidatePair, Status

from conftest import FIXTURES, SEEDS_KEPT


def scored(doc_id, score, **kw):
    return CandidatePair(doc_id, f"resp {doc_id}", instruction=f"inst {doc_id}", score=score, status=Status.SCORED, **kw)


class TestSeeds:
    def test_fixture_trees(self, caplog):
        trees = list(load_conversation_trees(FIXTURES / "seed_trees.jsonl"))
        assert len(trees) == 5
        assert "malformed" in caplog.text
        pairs = prepare_seed_pairs(trees)
        assert len(pairs) == SEEDS_KEPT
        assert [p.instruction for p in pairs] == ["How do I boil an egg?", "Name a prime number.", "What is a haiku?"]
        assert pairs[1].response == "Two is the smallest prime."

    def test_limit(self):
        trees = list(load_conversation_trees(FIXTURES / "seed_trees.jsonl"))
        assert len(prepare_seed_pairs(trees, limit=2)) == 2

    def test_oasst_shape(self, tmp_path):
        rec = {
            "message_tree_id": "abc",
            "prompt": {"role": "prompter", "text": "Hi?", "lang": "en", "replies": [{"role": "assistant", "text": "Hello.", "lang": "en", "rank": 0}]},
        }
        path = tmp_path / "o.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        assert oasst_to_tree(rec)["id"] == "abc"
        pairs = prepare_seed_pairs(load_conversation_trees(path, fmt="oasst"))
        assert pairs == [SeedPair("Hi?", "Hello.")]

    def test_direction_files(self, tmp_path):
        pairs = [SeedPair("q", "a")]
        emit_direction_training(pairs, "forward", tmp_path / "f.jsonl")
        emit_direction_training(pairs, "backward", tmp_path / "b.jsonl")
        assert json.loads((tmp_path / "f.jsonl").read_text()) == {"input": "q", "target": "a"}
        assert json.loads((tmp_path / "b.jsonl").read_text()) == {"input": "a", "target": "q"}
        with pytest.raises(ValueError):
            emit_direction_training(pairs, "sideways", tmp_path / "x.jsonl")
        with pytest.raises(ValueError):
            emit_direction_training([], "forward", tmp_path / "x.jsonl")


class TestFilter:
    def test_only_fives(self):
        pairs = [scored(f"d{i}", s) for i, s in enumerate((5, 4, 3, 5))] + [scored("dn", None)]
        assert [p.doc_id for p in filter_score5(pairs)] == ["d0", "d3"]

    def test_mark(self):
        assert mark_filtered(scored("a", 4)).status is Status.FILTERED_OUT
        assert mark_filtered(scored("a", None)).status is Status.FILTERED_OUT
        assert mark_filtered(scored("a", 5)).status is Status.SCORED


class TestBuild:
    def test_tags_and_order(self):
        pairs = [scored("b", 5), scored("a", 5)]
        records = build_finetune_dataset(pairs, [SeedPair("seed q", "seed a")], "initial")
        assert [r.source_tag for r in records] == [SourceTag.SEED_ASSISTANT, SourceTag.WEB_SEARCH, SourceTag.WEB_SEARCH]
        assert records[0].instruction == "seed q\n" + SEED_TAG
        assert records[1].instruction == "inst a\n" + WEB_TAG
        assert records[1].provenance == {"doc_id": "a", "variant": "initial", "score": 5}

    def test_missing_field_skipped_or_strict(self):
        pairs = [scored("a", 5)]
        assert build_finetune_dataset(pairs, [], "rewritten") == []
        with pytest.raises(DatasetError):
            build_finetune_dataset(pairs, [], "rewritten", strict=True)

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            build_finetune_dataset([], [], "bogus")

    def test_record_validation(self):
        with pytest.raises(ValueError):
            DatasetRecord("q", "a", SourceTag.WEB_SEARCH)
        with pytest.raises(ValueError):
            DatasetRecord("q\n" + WEB_TAG, "", SourceTag.WEB_SEARCH)

    def test_export_roundtrip(self, tmp_path):
        records = build_finetune_dataset([scored("é", 5)], [SeedPair("q", "日本")], "initial")
        path = tmp_path / "out" / "d.jsonl"
        assert export_jsonl(records, path) == 2
        assert "日本" in path.read_text(encoding="utf-8")
        assert read_dataset(path) == records
        assert list(json.loads(path.read_text().splitlines()[0])) == ["instruction", "response", "source_tag", "provenance"]


def test_cap_instruction_length():
    records = [DatasetRecord(("w " * n) + "\n" + WEB_TAG, "r", SourceTag.WEB_SEARCH) for n in (1, 2, 3, 50)]
    assert len(cap_instruction_length(records, 10, 10, seed=0, estimator="whitespace")) == 3
    picked = cap_instruction_length(records, 100, 2, seed=1, estimator="whitespace")
    assert len(picked) == 2
    assert picked == cap_instruction_length(records, 100, 2, seed=1, estimator="whitespace")
