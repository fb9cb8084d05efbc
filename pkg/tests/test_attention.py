import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccattn import numkit as nk
from ccattn.attention import (
    AttendedInfo,
    AttentionConfig,
    FragmentSet,
    attend,
    pair_similarity,
    score_matrix,
    similarity,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def text(x, tokens=None):
    return FragmentSet(nk.tensor(x), "text", tokens=tokens)


def image(x):
    return FragmentSet(nk.tensor(x), "image")


def naive_attend(q, k, tinv):
    """Per-element evaluation of relevance, weights and attended vectors."""
    nq, nk_ = len(q), len(k)
    e = np.zeros((nq, nk_))
    for i in range(nq):
        for j in range(nk_):
            e[i, j] = sum(a * b for a, b in zip(q[i], k[j])) / (
                math.sqrt(sum(a * a for a in q[i])) * math.sqrt(sum(b * b for b in k[j]))
            )
    w = np.zeros_like(e)
    for i in range(nq):
        denom = sum(math.exp(tinv * e[i, j]) for j in range(nk_))
        for j in range(nk_):
            w[i, j] = math.exp(tinv * e[i, j]) / denom
    a = np.array([[sum(w[i, j] * k[j][t] for j in range(nk_)) for t in range(len(k[0]))] for i in range(nq)])
    return e, w, a


class TestAttend:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        k = unit_rows(rng, 1, 4)
        amap, info = attend(text(unit_rows(rng, 3, 4)), image(k))
        np.testing.assert_array_equal(amap.weights.data, np.ones((3, 1)))
        np.testing.assert_allclose(info.vectors.data, np.repeat(k, 3, axis=0), atol=1e-15)

    def test_equal_scores_average_keys(self):
        # every key orthogonal to the query -> all scores 0
        q = np.array([[1.0, 0.0, 0.0]])
        k = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
        _, info = attend(text(q), image(k))
        np.testing.assert_allclose(info.vectors.data, k.mean(axis=0, keepdims=True), atol=1e-15)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        q, k = rng.standard_normal((3, 6)), rng.standard_normal((5, 6))
        amap, info = attend(text(q), image(k), temperature_inv=9.0)
        e, w, a = naive_attend(q.tolist(), k.tolist(), 9.0)
        np.testing.assert_allclose(amap.scores.data, e, atol=1e-12)
        np.testing.assert_allclose(amap.weights.data, w, atol=1e-12)
        np.testing.assert_allclose(info.vectors.data, a, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            attend(text(np.ones((2, 3))), image(np.ones((2, 4))))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        amap, _ = attend(text(rng.standard_normal((4, 5))), image(rng.standard_normal((7, 5))))
        np.testing.assert_allclose(amap.weights.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(amap.weights.data >= 0)

    def test_attended_norm_bound(self):
        rng = np.random.default_rng(3)
        k = rng.standard_normal((6, 4)) * rng.uniform(0.5, 3, size=(6, 1))
        _, info = attend(text(rng.standard_normal((5, 4))), image(k))
        assert np.all(np.linalg.norm(info.vectors.data, axis=1) <= np.linalg.norm(k, axis=1).max() + 1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_key_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        q, k = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        perm = rng.permutation(5)
        amap, info = attend(text(q), image(k))
        amap_p, info_p = attend(text(q), image(k[perm]))
        np.testing.assert_allclose(amap_p.weights.data, amap.weights.data[:, perm], atol=1e-12)
        np.testing.assert_allclose(info_p.vectors.data, info.vectors.data, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        q, k = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        scaled = k.copy()
        scaled[rng.integers(5)] *= c
        a1, _ = attend(text(q), image(k))
        a2, _ = attend(text(q * c), image(scaled))
        np.testing.assert_allclose(a2.scores.data, a1.scores.data, atol=1e-12)
        np.testing.assert_allclose(a2.weights.data, a1.weights.data, atol=1e-9)


class TestPairSimilarity:
    def test_identity_attended(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((4, 3))
        assert pair_similarity(text(q), AttendedInfo(nk.tensor(q))).item() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("agg", ["mean", "logsumexp"])
    def test_single_fragment(self, agg):
        q, a = np.array([[1.0, 2.0]]), np.array([[2.0, -1.0]])
        want = float(q[0] @ a[0] / (np.linalg.norm(q) * np.linalg.norm(a)))
        assert pair_similarity(text(q), AttendedInfo(nk.tensor(a)), agg).item() == pytest.approx(want, abs=1e-15)

    def test_mean_matches_hand_average(self):
        rng = np.random.default_rng(5)
        q, a = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        cos = [float(q[i] @ a[i] / (np.linalg.norm(q[i]) * np.linalg.norm(a[i]))) for i in range(5)]
        got = pair_similarity(text(q), AttendedInfo(nk.tensor(a)), "mean").item()
        assert got == pytest.approx(sum(cos) / 5, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mean_query_permutation_invariant_and_lse_dominates(self, seed):
        rng = np.random.default_rng(seed)
        q, a = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        perm = rng.permutation(4)
        base = pair_similarity(text(q), AttendedInfo(nk.tensor(a))).item()
        permuted = pair_similarity(text(q[perm]), AttendedInfo(nk.tensor(a[perm]))).item()
        assert permuted == pytest.approx(base, abs=1e-12)
        assert pair_similarity(text(q), AttendedInfo(nk.tensor(a)), "logsumexp").item() >= base

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            pair_similarity(text(np.ones((2, 3))), AttendedInfo(nk.tensor(np.ones((3, 3)))))


class TestScoreMatrix:
    def _batch(self, seed, sizes_t, sizes_i, d=5):
        rng = np.random.default_rng(seed)
        texts = [text(rng.standard_normal((n, d))) for n in sizes_t]
        images = [image(rng.standard_normal((n, d))) for n in sizes_i]
        return images, texts

    def test_single_pair(self):
        images, texts = self._batch(6, [3], [4])
        cfg = AttentionConfig()
        got = score_matrix(images, texts, cfg).data
        assert got.shape == (1, 1)
        assert got[0, 0] == pytest.approx(similarity(images[0], texts[0], cfg).item(), abs=1e-12)

    @pytest.mark.parametrize("direction", ["t2i", "i2t", "both"])
    @pytest.mark.parametrize("agg", ["mean", "logsumexp"])
    def test_entries_match_per_pair_route(self, direction, agg):
        images, texts = self._batch(7, [2, 4, 3], [5, 3, 6])
        cfg = AttentionConfig(direction=direction, agg=agg)
        got = score_matrix(images, texts, cfg).data
        for a, img in enumerate(images):
            for b, txt in enumerate(texts):
                assert got[a, b] == pytest.approx(similarity(img, txt, cfg).item(), abs=1e-12)

    def test_clipping_option_matches_per_pair(self):
        images, texts = self._batch(8, [2, 3], [4, 4])
        cfg = AttentionConfig(clip_negative=True)
        got = score_matrix(images, texts, cfg).data
        for a in range(2):
            for b in range(2):
                assert got[a, b] == pytest.approx(similarity(images[a], texts[b], cfg).item(), abs=1e-12)

    def test_duplicate_pair_gives_duplicate_entries(self):
        images, texts = self._batch(9, [3, 2], [4, 4])
        got = score_matrix(images + images[:1], texts + texts[:1]).data
        np.testing.assert_allclose(got[2], got[0], atol=1e-12)
        np.testing.assert_allclose(got[:, 2], got[:, 0], atol=1e-12)

    def test_training_batch_needs_two(self):
        images, texts = self._batch(10, [3], [4])
        with pytest.raises(ValueError):
            score_matrix(images, texts, training=True)


def test_fragment_set_validation():
    with pytest.raises(ValueError):
        FragmentSet(nk.tensor(np.ones((2, 3))), "image", boxes=np.array([[0, 0, 0, 1], [0, 0, 1, 1]]))
    with pytest.raises(ValueError):
        FragmentSet(nk.tensor(np.ones((2, 3))), "audio")
