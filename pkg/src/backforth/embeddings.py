"""Text embedders for MAUVE quantization."""

from __future__ import annotations

import hashlib
from collections import Counter
from functools import lru_cache
from typing import Sequence

import numpy as np

from backforth.stats import tokenize

HASHED_BOW_DIM = 64
HASHED_BOW_SEED = 20240101


class EmbeddingError(Exception):
    pass


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)


def hashed_bow(text: str, dim: int = HASHED_BOW_DIM, seed: int = HASHED_BOW_SEED) -> np.ndarray:
    """Bag-of-words counts pushed through a fixed random projection, L2-normalized.

    Deterministic and model-free; meant for tests and smoke runs.
    """
    vec = np.zeros(dim)
    for tok, count in sorted(Counter(tokenize(text)).items()):
        vec += count * _token_vector(tok, dim, seed)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def embed_texts(texts: Sequence[str], embedder: str = "hashed-bow", endpoint=None) -> np.ndarray:
    if not texts:
        raise EmbeddingError("no texts to embed")
    if embedder == "hashed-bow":
        return np.stack([hashed_bow(t) for t in texts])
    if embedder == "remote":
        if endpoint is None:
            raise EmbeddingError("the 'remote' embedder needs an embedding endpoint")
        from backforth.gateway import GatewayError, embed

        try:
            vectors = embed(list(texts), endpoint)
        except GatewayError as exc:
            raise EmbeddingError(str(exc)) from exc
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise EmbeddingError(f"embedding dimension mismatch across batch: {sorted(dims)}")
        return np.asarray(vectors, dtype=float)
    raise EmbeddingError(f"unknown embedder {embedder!r}")
