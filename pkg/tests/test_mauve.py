import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from backforth.embeddings import hashed_bow
from backforth.mauve import (
    MauveConfig,
    as_histogram,
    compute_mauve,
    divergence_frontier,
    kmeans,
    mauve_from_histograms,
    quantize_kmeans,
)

from oracles import disjoint_closed_form, mauve_bruteforce


def histograms(k):
    weights = st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k)
    return weights.map(lambda w: list(np.array(w) / np.sum(w)))


class TestFromHistograms:
    def test_identical_is_one(self):
        score, _ = mauve_from_histograms([0.25] * 4, [0.25] * 4)
        assert score == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_closed_form(self):
        score, _ = mauve_from_histograms([1, 0], [0, 1], c=5, m=25)
        assert disjoint_closed_form(5) == pytest.approx(1 / 252, abs=1e-12)
        assert score == pytest.approx(1 / 252, abs=1e-3)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        score, _ = mauve_from_histograms(p, q)
        assert score == pytest.approx(mauve_bruteforce(list(p), list(q)), abs=1e-6)

    @given(histograms(5), histograms(5))
    def test_symmetric_and_bounded(self, p, q):
        a, _ = mauve_from_histograms(p, q)
        b, _ = mauve_from_histograms(q, p)
        assert abs(a - b) <= 1e-9
        assert 0.0 <= a <= 1.0

    @given(histograms(6), st.permutations(range(6)))
    def test_permutation_invariant(self, p, perm):
        q = list(reversed(p))
        a, _ = mauve_from_histograms(p, q)
        b, _ = mauve_from_histograms([p[i] for i in perm], [q[i] for i in perm])
        assert abs(a - b) <= 1e-9

    def test_grid_convergence(self):
        p, q = [0.7, 0.2, 0.1], [0.1, 0.3, 0.6]
        scores = [mauve_from_histograms(p, q, m=m)[0] for m in (25, 100, 400, 1600)]
        gaps = [abs(a - b) for a, b in zip(scores, scores[1:])]
        assert gaps[-1] < gaps[0]
        assert gaps[-1] < 1e-3

    def test_curve_has_corners(self):
        curve = divergence_frontier([0.5, 0.5], [0.9, 0.1], 5, 25)
        assert (0.0, 1.0) in curve.points and (1.0, 0.0) in curve.points
        assert len(curve.points) == 27

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [[0.5, 0.5]]])
    def test_bad_histogram(self, bad):
        with pytest.raises(ValueError):
            as_histogram(bad)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mauve_from_histograms([1.0], [0.5, 0.5])


class TestKmeans:
    def test_two_blobs(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(0, 0.1, (50, 2)), rng.normal(10, 0.1, (50, 2))])
        labels, _ = kmeans(x, 2, seed=3)
        assert len(set(labels[:50])) == 1 and len(set(labels[50:])) == 1 and labels[0] != labels[-1]

    def test_deterministic(self):
        x = np.random.default_rng(1).normal(size=(80, 4))
        a, _ = kmeans(x, 5, seed=9)
        b, _ = kmeans(x, 5, seed=9)
        assert np.array_equal(a, b)

    def test_no_empty_clusters(self):
        x = np.random.default_rng(2).normal(size=(30, 3))
        labels, _ = kmeans(x, 10, seed=0)
        assert len(set(labels)) == 10

    def test_k_reduced_to_distinct_points(self, caplog):
        vp = np.ones((30, 2))
        vq = np.vstack([np.ones((15, 2)), np.zeros((15, 2))])
        hp, hq = quantize_kmeans(vp, vq, MauveConfig(num_clusters=5))
        assert len(hp) == 2 and "reducing k" in caplog.text

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            quantize_kmeans(np.ones((3, 2)), np.ones((3, 4)), MauveConfig())


class TestConfig:
    def test_auto_k(self):
        assert MauveConfig().clusters_for(1000, 500) == 50
        assert MauveConfig().clusters_for(5, 500) == 2
        assert MauveConfig(num_clusters=7).clusters_for(1000, 1000) == 7

    @pytest.mark.parametrize("kw", [{"num_clusters": 1}, {"scaling_constant": 0}, {"grid_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MauveConfig(**kw)


class TestTexts:
    def test_same_texts_high(self):
        texts = [f"the cat sat on mat number {i}" for i in range(40)]
        report = compute_mauve(texts, list(texts), MauveConfig(num_clusters=4))
        assert report.score == pytest.approx(1.0, abs=1e-9)
        assert report.k_used == 4 and report.sample_sizes == (40, 40)

    def test_different_texts_lower(self):
        a = [f"apples and pears grow in orchard {i}" for i in range(40)]
        b = [f"quantum field theory lecture {i} notes" for i in range(40)]
        report = compute_mauve(a, b, MauveConfig(num_clusters=4))
        assert report.score < 0.5

    def test_histogram_shortcut(self):
        report = compute_mauve(None, None, histograms=([1, 0], [0, 1]))
        assert report.score == pytest.approx(1 / 252, abs=1e-3)

    def test_empty_texts(self):
        with pytest.raises(ValueError):
            compute_mauve([], ["x"])

    def test_hashed_bow_deterministic_and_normalized(self):
        v = hashed_bow("Hello, world! hello")
        assert np.allclose(v, hashed_bow("hello world HELLO"))
        assert np.linalg.norm(v) == pytest.approx(1.0)
