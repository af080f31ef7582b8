"""Seed-pair preparation, score-5 filtering and fine-tuning dataset assembly."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from backforth.corpus import estimate_tokens
from backforth.stages import CandidatePair, Status

logger = logging.getLogger(__name__)

WEB_TAG = "Answer with knowledge from web search."
SEED_TAG = "Answer in the style of an AI Assistant."
DEFAULT_SEED_LIMIT = 3200


class DatasetError(Exception):
    pass


class SourceTag(str, Enum):
    SEED_ASSISTANT = "seed_assistant"
    WEB_SEARCH = "web_search"


_TAG_SENTENCE = {SourceTag.SEED_ASSISTANT: SEED_TAG, SourceTag.WEB_SEARCH: WEB_TAG}


@dataclass(frozen=True)
class SeedPair:
    instruction: str
    response: str
    language: str = "en"
    rank: int = 0


@dataclass(frozen=True)
class DatasetRecord:
    instruction: str
    response: str
    source_tag: SourceTag
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "source_tag", SourceTag(self.source_tag))
        if not self.response:
            raise ValueError("response must be non-empty")
        if not self.instruction.endswith(_TAG_SENTENCE[self.source_tag]):
            raise ValueError(f"instruction does not end with the {self.source_tag.value} tag sentence")

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "response": self.response,
            "source_tag": self.source_tag.value,
            "provenance": self.provenance,
        }


def tag_instruction(instruction: str, tag: SourceTag) -> str:
    return f"{instruction}\n{_TAG_SENTENCE[tag]}"


# --------------------------------------------------------------------------- #
# seed data
# --------------------------------------------------------------------------- #


def oasst_to_tree(record: dict) -> dict:
    """Map one tree of the public Open Assistant ``*.trees.jsonl`` export to the generic shape."""
    prompt = record["prompt"]
    return {
        "id": record.get("message_tree_id", prompt.get("message_id")),
        "prompt": {"role": prompt["role"], "text": prompt["text"], "language": prompt.get("lang")},
        "replies": [
            {"role": r["role"], "text": r["text"], "language": r.get("lang"), "rank": r.get("rank")}
            for r in prompt.get("replies", [])
        ],
    }


def load_conversation_trees(path: str | Path, fmt: str = "tree") -> Iterator[dict]:
    """Read line-delimited conversation trees; ``fmt='oasst'`` converts the public export."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                yield oasst_to_tree(record) if fmt == "oasst" else record
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                logger.warning("%s:%d: skipping malformed conversation tree (%s)", path, lineno, exc)


def _first_turn_pair(tree: dict) -> SeedPair | None:
    prompt = tree["prompt"]
    if prompt.get("role") not in (None, "prompter", "user"):
        return None
    for reply in tree.get("replies", []):
        if reply.get("role", "assistant") != "assistant" or reply.get("rank") != 0:
            continue
        if reply.get("language") != "en":
            return None
        if not prompt["text"].strip() or not reply["text"].strip():
            return None
        return SeedPair(prompt["text"], reply["text"], "en", 0)
    return None


def prepare_seed_pairs(conversations: Iterable[dict], limit: int = DEFAULT_SEED_LIMIT) -> list[SeedPair]:
    """First-turn, rank-0, English (prompt, reply) pairs in input order, capped at ``limit``."""
    if limit < 1:
        raise ValueError("limit must be positive")
    out: list[SeedPair] = []
    for i, tree in enumerate(conversations):
        try:
            pair = _first_turn_pair(tree)
        except (KeyError, TypeError, AttributeError) as exc:
            logger.warning("conversation tree %d is malformed (%s); skipped", i, exc)
            continue
        if pair is None:
            continue
        out.append(pair)
        if len(out) >= limit:
            break
    return out


def emit_direction_training(pairs: Sequence[SeedPair], direction: str, path: str | Path) -> int:
    """Write forward (instruction -> response) or backward (response -> instruction) training lines."""
    if not pairs:
        raise ValueError("no seed pairs to write")
    if direction == "forward":
        rows = ({"input": p.instruction, "target": p.response} for p in pairs)
    elif direction == "backward":
        rows = ({"input": p.response, "target": p.instruction} for p in pairs)
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    return _write_jsonl(rows, path)


# --------------------------------------------------------------------------- #
# curation and assembly
# --------------------------------------------------------------------------- #


def filter_score5(pairs: Iterable[CandidatePair]) -> list[CandidatePair]:
    """Keep exactly the pairs scored 5; use :func:`mark_filtered` to flag the rest."""
    kept = []
    for pair in pairs:
        if pair.score == 5 and pair.status is not Status.FILTERED_OUT:
            kept.append(pair)
    return kept


def mark_filtered(pair: CandidatePair) -> CandidatePair:
    if pair.score == 5 or pair.status is not Status.SCORED:
        return pair
    return replace(pair, status=Status.FILTERED_OUT)


RESPONSE_FIELDS = {
    "initial": "response_initial",
    "rewritten": "response_rewritten",
    "distilled": "response_distilled",
}


def build_finetune_dataset(
    pairs: Iterable[CandidatePair],
    seeds: Sequence[SeedPair],
    response_field: str,
    *,
    variant: str | None = None,
    strict: bool = False,
) -> list[DatasetRecord]:
    try:
        attr = RESPONSE_FIELDS[response_field]
    except KeyError:
        raise ValueError(f"response_field must be one of {sorted(RESPONSE_FIELDS)}") from None

    records = [
        DatasetRecord(tag_instruction(s.instruction, SourceTag.SEED_ASSISTANT), s.response, SourceTag.SEED_ASSISTANT, {"source": "seed"})
        for s in seeds
    ]
    for pair in sorted(pairs, key=lambda p: p.doc_id):
        response = getattr(pair, attr)
        if not response or not pair.instruction:
            msg = f"{pair.doc_id}: no {response_field} response; skipped"
            if strict:
                raise DatasetError(msg)
            logger.warning(msg)
            continue
        provenance = {"doc_id": pair.doc_id, "variant": variant or response_field, "score": pair.score}
        records.append(DatasetRecord(tag_instruction(pair.instruction, SourceTag.WEB_SEARCH), response, SourceTag.WEB_SEARCH, provenance))
    return records


def cap_instruction_length(
    records: Sequence[DatasetRecord],
    max_tokens: int,
    n: int,
    seed: int,
    estimator: str = "bytes4",
) -> list[DatasetRecord]:
    """Drop records with over-long instructions, then sample ``n`` of the rest uniformly."""
    survivors = [r for r in records if estimate_tokens(r.instruction, estimator) <= max_tokens]
    if len(survivors) < n:
        logger.warning("only %d records within %d instruction tokens; wanted %d", len(survivors), max_tokens, n)
        return survivors
    idx = sorted(random.Random(seed).sample(range(len(survivors)), n))
    return [survivors[i] for i in idx]


# --------------------------------------------------------------------------- #
# export
# --------------------------------------------------------------------------- #


def _write_jsonl(rows: Iterable[dict], path: str | Path) -> int:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        n = 0
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
                n += 1
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return n


def export_jsonl(records: Sequence[DatasetRecord], path: str | Path) -> int:
    return _write_jsonl((r.to_dict() for r in records), path)


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord(**json.loads(line)) for line in fh if line.strip()]
