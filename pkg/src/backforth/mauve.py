"""MAUVE: area under the divergence frontier of two quantized text distributions.

Both sample sets are embedded, jointly clustered with k-means, and turned
into cluster-occupancy histograms ``p`` and ``q``. For mixture weights
``lam`` on an interior grid the frontier point is

    (exp(-c * KL(q || r)), exp(-c * KL(p || r))),   r = lam * p + (1 - lam) * q

and the score is the trapezoidal area under those points plus the corners
``(0, 1)`` and ``(1, 0)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MauveConfig:
    num_clusters: int | str = "auto"
    scaling_constant: float = 5.0
    grid_size: int = 25
    kmeans_seed: int = 0
    kmeans_max_iters: int = 300
    embedder: str = "hashed-bow"

    def __post_init__(self):
        if self.num_clusters != "auto" and (not isinstance(self.num_clusters, int) or self.num_clusters < 2):
            raise ValueError("num_clusters must be 'auto' or an integer >= 2")
        if not self.scaling_constant > 0:
            raise ValueError("scaling_constant must be > 0")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if self.kmeans_max_iters < 1:
            raise ValueError("kmeans_max_iters must be >= 1")

    def clusters_for(self, n_p: int, n_q: int) -> int:
        if self.num_clusters == "auto":
            return max(2, min(n_p, n_q) // 10)
        return int(self.num_clusters)


@dataclass(frozen=True)
class DivergenceCurve:
    points: list[tuple[float, float]]

    @property
    def xs(self) -> np.ndarray:
        return np.array([x for x, _ in self.points])

    @property
    def ys(self) -> np.ndarray:
        return np.array([y for _, y in self.points])


@dataclass
class MauveReport:
    score: float
    curve: DivergenceCurve
    k_used: int
    sample_sizes: tuple[int, int]
    histograms: tuple[list[float], list[float]] = field(default=((), ()))

    def to_dict(self, with_curve: bool = False) -> dict:
        d = {"score": self.score, "k_used": self.k_used, "sample_sizes": list(self.sample_sizes)}
        if with_curve:
            d["curve"] = [list(p) for p in self.curve.points]
        return d


def as_histogram(weights: Sequence[float], tol: float = 1e-9) -> np.ndarray:
    h = np.asarray(weights, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("histogram must be a non-empty vector")
    if (h < 0).any():
        raise ValueError("histogram weights must be non-negative")
    if abs(h.sum() - 1.0) > tol:
        raise ValueError(f"histogram weights sum to {h.sum()!r}, not 1")
    return h


# --------------------------------------------------------------------------- #
# k-means quantization
# --------------------------------------------------------------------------- #


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = x[rng.integers(n, size=k - i)]
            break
        idx = rng.choice(n, p=d2 / total)
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x**2).sum(1)[:, None] - 2.0 * x @ centers.T + (centers**2).sum(1)[None, :]
    return d.argmin(axis=1)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iters: int = 300) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; stops once assignments are stable.

    Returns ``(labels, centers)``. Empty clusters are re-seeded with the point
    farthest from its current center.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = _assign(x, centers)
    for _ in range(max_iters):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                far = ((x - centers[labels]) ** 2).sum(1).argmax()
                centers[j] = x[far]
                labels[far] = j
        new_labels = _assign(x, centers)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centers


def quantize_kmeans(vectors_p, vectors_q, config: MauveConfig) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(vectors_p, dtype=float)
    q = np.asarray(vectors_q, dtype=float)
    if p.ndim != 2 or q.ndim != 2 or len(p) == 0 or len(q) == 0:
        raise ValueError("both vector sets must be non-empty 2-D arrays")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    union = np.vstack([p, q])
    k = config.clusters_for(len(p), len(q))
    distinct = len(np.unique(union, axis=0))
    if k > distinct:
        logger.warning("reducing k from %d to %d distinct points", k, distinct)
        k = distinct
    labels, _ = kmeans(union, k, seed=config.kmeans_seed, max_iters=config.kmeans_max_iters)
    hp = np.bincount(labels[: len(p)], minlength=k) / len(p)
    hq = np.bincount(labels[len(p) :], minlength=k) / len(q)
    return hp, hq


# --------------------------------------------------------------------------- #
# frontier and area
# --------------------------------------------------------------------------- #


def kl_divergence(a: np.ndarray, b: np.ndarray) -> float:
    """KL(a || b) in nats with 0 * log(0 / x) = 0."""
    mask = a > 0
    return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))


def divergence_frontier(p, q, c: float = 5.0, m: int = 25) -> DivergenceCurve:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"histogram length mismatch: {p.size} vs {q.size}")
    points = [(0.0, 1.0), (1.0, 0.0)]
    for j in range(1, m + 1):
        # symmetric in (p, q) under j -> m + 1 - j
        r = (j * p + (m + 1 - j) * q) / (m + 1)
        points.append((math.exp(-c * kl_divergence(q, r)), math.exp(-c * kl_divergence(p, r))))
    points.sort(key=lambda pt: pt[0])
    return DivergenceCurve(points)


def mauve_auc(curve: DivergenceCurve) -> float:
    best: dict[float, float] = {}
    for x, y in curve.points:
        best[x] = max(y, best.get(x, -math.inf))
    xs = sorted(best)
    area = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        area += (x1 - x0) * (best[x0] + best[x1]) / 2.0
    return min(1.0, max(0.0, area))


def mauve_from_histograms(p, q, c: float = 5.0, m: int = 25) -> tuple[float, DivergenceCurve]:
    curve = divergence_frontier(as_histogram(p), as_histogram(q), c, m)
    return mauve_auc(curve), curve


def compute_mauve(
    texts_p: Sequence[str] | None,
    texts_q: Sequence[str] | None,
    config: MauveConfig = MauveConfig(),
    *,
    histograms: tuple[Sequence[float], Sequence[float]] | None = None,
    embedder_endpoint=None,
) -> MauveReport:
    """Embed, quantize, trace the frontier and integrate.

    Pass ``histograms=(p, q)`` to skip embedding and clustering.
    """
    if histograms is not None:
        hp, hq = (as_histogram(h) for h in histograms)
        sizes = (0, 0)
    else:
        if not texts_p or not texts_q:
            raise ValueError("both text sets must be non-empty")
        from backforth.embeddings import embed_texts

        vp = embed_texts(texts_p, config.embedder, endpoint=embedder_endpoint)
        vq = embed_texts(texts_q, config.embedder, endpoint=embedder_endpoint)
        hp, hq = quantize_kmeans(vp, vq, config)
        sizes = (len(texts_p), len(texts_q))
    score, curve = mauve_from_histograms(hp, hq, config.scaling_constant, config.grid_size)
    return MauveReport(score, curve, len(hp), sizes, (hp.tolist(), hq.tolist()))
