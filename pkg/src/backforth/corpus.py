"""Streaming ingest of pre-cleaned web documents used as candidate responses."""

from __future__ import annotations

import gzip
import io
import itertools
import json
import logging
import math
import random
import re
from dataclasses import asdict, astuple, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 3584
DEFAULT_ESTIMATOR = "bytes4"

_NON_WS_RUN = re.compile(r"\S+")


class CorpusError(Exception):
    """Unreadable corpus file or malformed record in strict mode."""


class EstimatorError(ValueError):
    """Unknown or misconfigured token estimator."""


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    source: str
    token_estimate: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IngestStats:
    read_count: int = 0
    kept_count: int = 0
    dropped_too_long: int = 0
    dropped_empty: int = 0
    malformed: int = 0

    def merge(self, other: IngestStats) -> IngestStats:
        return IngestStats(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- #
# token estimation
# --------------------------------------------------------------------------- #


def _whitespace(text: str) -> int:
    return len(_NON_WS_RUN.findall(text))


def _bytes4(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


_ESTIMATORS: dict[str, Callable[[str], int]] = {
    "whitespace": _whitespace,
    "bytes4": _bytes4,
}


def estimate_tokens(text: str, estimator: str = DEFAULT_ESTIMATOR, endpoint=None) -> int:
    """Count tokens in ``text`` with a registered estimator.

    ``"remote"`` asks the tokenization route of ``endpoint`` and propagates
    any failure; there is no fallback to a local estimate.
    """
    if estimator == "remote":
        if endpoint is None:
            raise EstimatorError("the 'remote' estimator needs a tokenizer endpoint")
        from backforth.gateway import count_tokens

        return count_tokens(text, endpoint)
    try:
        fn = _ESTIMATORS[estimator]
    except KeyError:
        known = ", ".join(sorted([*_ESTIMATORS, "remote"]))
        raise EstimatorError(f"unknown token estimator {estimator!r} (known: {known})") from None
    return fn(text)


def check_estimator(estimator: str) -> None:
    if estimator != "remote" and estimator not in _ESTIMATORS:
        estimate_tokens("", estimator)


# --------------------------------------------------------------------------- #
# streaming
# --------------------------------------------------------------------------- #


def _open_text(path: Path) -> io.TextIOBase:
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def stream_documents(
    source_path: str | Path,
    source_label: str | None = None,
    *,
    text_field: str = "text",
    id_field: str = "id",
    estimator: str = DEFAULT_ESTIMATOR,
    estimator_endpoint=None,
    strict: bool = False,
    stats: IngestStats | None = None,
) -> Iterator[Document]:
    """Yield one :class:`Document` per usable record of a JSONL(.gz) file.

    Records with blank text are counted in ``stats.dropped_empty``; malformed
    lines are logged and skipped unless ``strict`` is set.
    """
    path = Path(source_path)
    label = source_label if source_label is not None else path.name
    stats = stats if stats is not None else IngestStats()
    check_estimator(estimator)
    try:
        fh = _open_text(path)
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    with fh:
        try:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    if not isinstance(record, dict):
                        raise ValueError("record is not a JSON object")
                    text = record.get(text_field)
                    if text is None:
                        raise ValueError(f"missing field {text_field!r}")
                    if not isinstance(text, str):
                        raise ValueError(f"field {text_field!r} is not a string")
                except ValueError as exc:
                    stats.malformed += 1
                    if strict:
                        raise CorpusError(f"{path}:{lineno}: malformed record: {exc}") from exc
                    logger.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                    continue
                stats.read_count += 1
                if not text.strip():
                    stats.dropped_empty += 1
                    continue
                doc_id = record.get(id_field)
                doc_id = str(doc_id) if doc_id is not None else f"{path.name}:{lineno}"
                stats.kept_count += 1
                yield Document(
                    id=doc_id,
                    text=text,
                    source=label,
                    token_estimate=estimate_tokens(text, estimator, estimator_endpoint),
                )
        except (OSError, EOFError, UnicodeDecodeError) as exc:
            raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc


def expand_sources(paths: str | Path | Sequence[str | Path]) -> list[Path]:
    """Resolve files and directories to a sorted list of corpus files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    out: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.name.endswith((".jsonl", ".jsonl.gz", ".json", ".json.gz"))))
        else:
            out.append(p)
    return out


# --------------------------------------------------------------------------- #
# filtering and sampling
# --------------------------------------------------------------------------- #


def filter_by_length(docs: Iterable[Document], max_tokens: int = DEFAULT_MAX_TOKENS) -> tuple[list[Document], IngestStats]:
    if max_tokens < 1:
        raise ValueError("max_tokens must be positive")
    kept: list[Document] = []
    stats = IngestStats()
    for doc in docs:
        stats.read_count += 1
        if doc.token_estimate <= max_tokens:
            kept.append(doc)
        else:
            stats.dropped_too_long += 1
    stats.kept_count = len(kept)
    return kept, stats


def reservoir_sample(items: Iterable, n: int, seed: int) -> list:
    """Uniform sample of ``n`` items in one pass (Li's Algorithm L).

    Returned in reservoir order; callers impose their own ordering.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    it = iter(items)
    reservoir = list(itertools.islice(it, n))
    if len(reservoir) < n:
        return reservoir
    w = math.exp(math.log(1.0 - rng.random()) / n)
    while 0.0 < w:
        skip = math.floor(math.log(1.0 - rng.random()) / math.log(1.0 - w)) if w < 1.0 else 0
        nxt = next(itertools.islice(it, skip, None), _SENTINEL)
        if nxt is _SENTINEL:
            return reservoir
        reservoir[rng.randrange(n)] = nxt
        w *= math.exp(math.log(1.0 - rng.random()) / n)
    return reservoir


_SENTINEL = object()


def sample_documents(docs: Iterable[Document], n: int, seed: int) -> list[Document]:
    return sorted(reservoir_sample(docs, n, seed), key=lambda d: d.id)
