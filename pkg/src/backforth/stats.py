"""Diversity, length and score-distribution statistics over datasets."""

from __future__ import annotations

import random
import unicodedata
from collections import Counter
from typing import Iterable, Sequence

from backforth.corpus import estimate_tokens


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, strip edge punctuation, drop empties."""
    out = []
    for tok in text.lower().split():
        tok = _strip_punct(tok)
        if tok:
            out.append(tok)
    return out


def unique_trigrams(texts: Sequence[str], sample_n: int, seed: int = 0) -> int:
    """Distinct consecutive token triples across a seeded sample of ``texts``.

    Triples never span two texts; duplicates are counted once across the sample.
    """
    if sample_n < 1:
        raise ValueError("sample_n must be positive")
    if sample_n < len(texts):
        idx = sorted(random.Random(seed).sample(range(len(texts)), sample_n))
        texts = [texts[i] for i in idx]
    seen: set[tuple[str, str, str]] = set()
    for text in texts:
        toks = tokenize(text)
        seen.update(zip(toks, toks[1:], toks[2:]))
    return len(seen)


def length_stats(records: Iterable[tuple[str, str]], estimator: str = "whitespace", endpoint=None) -> tuple[float, float]:
    n = 0
    total_i = total_r = 0
    for instruction, response in records:
        n += 1
        total_i += estimate_tokens(instruction, estimator, endpoint)
        total_r += estimate_tokens(response, estimator, endpoint)
    if n == 0:
        raise ValueError("length_stats needs at least one record")
    return round(total_i / n, 1), round(total_r / n, 1)


def score_histogram(scores: Iterable[int | None]) -> dict:
    """Counts per score 1..5 plus invalid, with valid and score-5 fractions of the total.

    Accepts raw scores or anything with a ``score`` attribute (e.g. ``CandidatePair``).
    """
    counts: Counter[int] = Counter()
    invalid = total = 0
    for item in scores:
        s = getattr(item, "score", item)
        total += 1
        if s in (1, 2, 3, 4, 5):
            counts[s] += 1
        else:
            invalid += 1
    if total == 0:
        raise ValueError("empty score set")
    valid = total - invalid
    return {
        "counts": {str(k): counts[k] for k in range(1, 6)},
        "invalid": invalid,
        "total": total,
        "valid_fraction": valid / total,
        "score5_fraction": counts[5] / total,
    }
