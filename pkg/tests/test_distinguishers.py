"""Statistical-core tests: hand-computed Welford values, closed-form SNR,
batch Pearson oracles, merge laws, rank conventions, disclosure logic."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emgrid.distinguishers import (
    CpaAccumulator,
    SnrAccumulator,
    cpa_scores,
    loglik_aggregate,
    mean_rank,
    rank_of,
    traces_to_disclosure,
)
from emgrid.errors import AnalysisError


# ---------------------------------------------------------------- SNR

def test_welford_single_update():
    acc = SnrAccumulator(num_classes=4, m=3)
    acc.update(2, np.array([1.0, -1.0, 5.0]))
    assert acc.counts[2] == 1
    assert np.array_equal(acc.mean[2], [1.0, -1.0, 5.0])
    assert np.array_equal(acc.m2[2], [0.0, 0.0, 0.0])


def test_welford_hand_values():
    # Samples 2 then 4 in one class: mean 3, M2 = (2-3)^2 + (4-3)^2 = 2.
    acc = SnrAccumulator(num_classes=2, m=1)
    acc.update(0, [2.0]).update(0, [4.0])
    assert acc.counts[0] == 2
    assert acc.mean[0][0] == 3.0
    assert acc.m2[0][0] == 2.0


def test_snr_closed_form():
    # Class A {-1,0,1}: mean 0, unbiased var 1. Class B {1,2,3}: mean 2,
    # var 1. Population variance of means {0,2} is 1, so SNR = 1 exactly.
    acc = SnrAccumulator(num_classes=2, m=1)
    for v in (-1.0, 0.0, 1.0):
        acc.update(0, [v])
    for v in (1.0, 2.0, 3.0):
        acc.update(1, [v])
    snr = acc.finalize()
    assert snr.shape == (1,)
    assert snr[0] == pytest.approx(1.0, abs=1e-12)


def test_snr_order_invariance():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 60)
    xs = rng.normal(size=(60, 5))
    a = SnrAccumulator(4, 5)
    b = SnrAccumulator(4, 5)
    for i in range(60):
        a.update(labels[i], xs[i])
    for i in rng.permutation(60):
        b.update(labels[i], xs[i])
    np.testing.assert_allclose(a.finalize(), b.finalize(), rtol=1e-12)


def test_snr_near_zero_when_classes_identical():
    rng = np.random.default_rng(1)
    acc = SnrAccumulator(2, 4)
    acc.update_batch(np.zeros(10_000, dtype=int), rng.normal(size=(10_000, 4)))
    acc.update_batch(np.ones(10_000, dtype=int), rng.normal(size=(10_000, 4)))
    assert np.all(acc.finalize() < 0.05)


def test_snr_infinite_sentinel_on_noiseless_signal():
    acc = SnrAccumulator(2, 2)
    for _ in range(3):
        acc.update(0, [1.0, 7.0])
        acc.update(1, [2.0, 7.0])
    snr = acc.finalize()
    assert snr[0] == np.inf  # class-dependent, zero noise
    assert snr[1] == 0.0     # constant everywhere: no signal, no noise


def test_snr_insufficient_data():
    acc = SnrAccumulator(3, 2)
    acc.update(0, [1.0, 2.0]).update(0, [2.0, 3.0]).update(1, [0.0, 1.0])
    with pytest.raises(AnalysisError):
        acc.finalize()  # only one class reaches 2 traces
    with pytest.raises(AnalysisError):
        acc.update(3, [0.0, 0.0])


def test_snr_batch_equals_single_updates():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 9, 300)
    xs = rng.normal(size=(300, 7))
    a = SnrAccumulator(9, 7)
    for i in range(300):
        a.update(labels[i], xs[i])
    b = SnrAccumulator(9, 7).update_batch(labels, xs)
    np.testing.assert_allclose(a.finalize(), b.finalize(), rtol=1e-12)


def test_snr_merge_law_three_way():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 5, 400)
    xs = rng.normal(size=(400, 6))
    single = SnrAccumulator(5, 6).update_batch(labels, xs)
    merged = SnrAccumulator(5, 6)
    for lo, hi in ((0, 150), (150, 151), (151, 400)):
        shard = SnrAccumulator(5, 6).update_batch(labels[lo:hi], xs[lo:hi])
        merged.merge(shard)
    np.testing.assert_allclose(merged.finalize(), single.finalize(), rtol=1e-12)


# ---------------------------------------------------------------- CPA

def batch_pearson(H, X):
    """Two-pass oracle: plain centered Pearson per (hypothesis, sample)."""
    Hc = H - H.mean(axis=1, keepdims=True)
    Xc = X - X.mean(axis=0, keepdims=True)
    num = Hc @ Xc
    den = np.sqrt((Hc ** 2).sum(axis=1)[:, None] * (Xc ** 2).sum(axis=0)[None, :])
    return num / den


def test_cpa_single_trace_errors():
    acc = CpaAccumulator(m=3)
    acc.update(np.arange(256), [1.0, 2.0, 3.0])
    with pytest.raises(AnalysisError):
        acc.finalize()


def test_cpa_matches_batch_pearson_oracle():
    rng = np.random.default_rng(4)
    H = rng.integers(0, 9, (256, 100))
    X = rng.normal(size=(100, 12))
    acc = CpaAccumulator(m=12)
    for i in range(100):
        acc.update(H[:, i], X[i])
    res = acc.finalize()
    np.testing.assert_allclose(res.corr, batch_pearson(H.astype(float), X),
                               rtol=1e-9, atol=1e-12)
    assert not res.degenerate_hypotheses.any()
    assert not res.degenerate_samples.any()


def test_cpa_update_batch_equals_updates():
    rng = np.random.default_rng(5)
    H = rng.integers(0, 256, (256, 64))
    X = rng.normal(size=(64, 9))
    a = CpaAccumulator(m=9)
    for i in range(64):
        a.update(H[:, i], X[i])
    b = CpaAccumulator(m=9).update_batch(H, X)
    np.testing.assert_allclose(a.finalize().corr, b.finalize().corr, rtol=1e-12)


def test_cpa_merge_law():
    rng = np.random.default_rng(6)
    H = rng.integers(0, 9, (256, 150))
    X = rng.normal(size=(150, 5))
    single = CpaAccumulator(m=5).update_batch(H, X)
    merged = CpaAccumulator(m=5)
    for lo, hi in ((0, 40), (40, 41), (41, 150)):
        merged.merge(CpaAccumulator(m=5).update_batch(H[:, lo:hi], X[lo:hi]))
    np.testing.assert_allclose(merged.finalize().corr, single.finalize().corr,
                               rtol=1e-12)


def test_cpa_perfect_correlation_signs():
    acc = CpaAccumulator(m=1, num_hypotheses=2)
    for v in (1.0, 2.0, 5.0):
        acc.update([v, -v], [v])
    res = acc.finalize()
    assert res.corr[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert res.corr[1, 0] == pytest.approx(-1.0, abs=1e-12)


def test_cpa_constant_row_flagged_zero():
    acc = CpaAccumulator(m=2, num_hypotheses=3)
    H = np.array([[1, 1, 1], [0, 1, 2], [5, 5, 5]])  # rows 0 and 2 constant
    acc.update_batch(H, np.array([[0.1, 1.0], [0.2, 2.0], [0.3, 1.5]]))
    res = acc.finalize()
    assert res.degenerate_hypotheses.tolist() == [True, False, True]
    assert np.all(res.corr[0] == 0.0) and np.all(res.corr[2] == 0.0)
    assert abs(res.corr[1, 0]) > 0


def test_cpa_constant_sample_column_flagged():
    acc = CpaAccumulator(m=2, num_hypotheses=4)
    rng = np.random.default_rng(7)
    H = rng.integers(0, 4, (4, 10))
    X = np.column_stack([np.full(10, 3.25), rng.normal(size=10)])
    res = acc.update_batch(H, X).finalize()
    assert res.degenerate_samples.tolist() == [True, False]
    assert np.all(res.corr[:, 0] == 0.0)


def test_cpa_bounds_on_random_data():
    rng = np.random.default_rng(8)
    acc = CpaAccumulator(m=20)
    acc.update_batch(rng.integers(0, 9, (256, 500)), rng.normal(size=(500, 20)))
    corr = acc.finalize().corr
    assert np.all(corr <= 1 + 1e-9) and np.all(corr >= -1 - 1e-9)


def test_cpa_affine_invariance_of_ranks():
    rng = np.random.default_rng(9)
    H = rng.integers(0, 9, (256, 200))
    X = rng.normal(size=(200, 8))
    r1 = CpaAccumulator(m=8).update_batch(H, X).finalize().corr
    r2 = CpaAccumulator(m=8).update_batch(H, 3.7 * X + 11.0).finalize().corr
    s1, s2 = cpa_scores(r1), cpa_scores(r2)
    assert s1.argmax() == s2.argmax()
    for c in (0, 13, 255):
        assert rank_of(s1, c) == rank_of(s2, c)


def test_cpa_scores_row_scan_oracle():
    rng = np.random.default_rng(10)
    corr = rng.uniform(-1, 1, (256, 30))
    scores = cpa_scores(corr)
    for j in range(0, 256, 31):
        assert scores[j] == max(abs(v) for v in corr[j])
    corr[3] = 0.9
    corr[np.arange(256) != 3] *= 0.3
    assert cpa_scores(corr).argmax() == 3
    assert np.all(cpa_scores(np.zeros((256, 4))) == 0.0)


# ---------------------------------------------------------- scores/ranks

def test_loglik_uniform_and_onehot():
    uni = np.full(256, 1 / 256)
    scores = loglik_aggregate([uni])
    np.testing.assert_allclose(scores, math.log(1 / 256), rtol=1e-12)

    hot = np.zeros(256)
    hot[42] = 1.0
    scores = loglik_aggregate([hot, hot])
    assert scores[42] == pytest.approx(0.0, abs=1e-12)
    other = np.delete(scores, 42)
    np.testing.assert_allclose(other, 2 * math.log(1e-30), rtol=1e-12)


def test_loglik_matches_fsum_oracle():
    rng = np.random.default_rng(11)
    vecs = rng.dirichlet(np.ones(256), size=100)
    scores = loglik_aggregate(vecs)
    for j in (0, 77, 255):
        want = math.fsum(math.log(max(v, 1e-30)) for v in vecs[:, j])
        assert scores[j] == pytest.approx(want, rel=1e-10)


def test_loglik_rejects_malformed():
    bad = np.full(256, 1 / 256)
    with pytest.raises(AnalysisError):
        loglik_aggregate([bad * 1.5])
    neg = bad.copy()
    neg[0] = -bad[0]
    with pytest.raises(AnalysisError):
        loglik_aggregate([neg])
    with pytest.raises(AnalysisError):
        loglik_aggregate([])
    with pytest.raises(AnalysisError):
        loglik_aggregate([np.full(128, 1 / 128)])


def test_rank_of_examples():
    scores = np.zeros(256)
    scores[7] = 1.0
    assert rank_of(scores, 7) == 0.0
    assert rank_of(np.full(256, 0.25), 3) == 127.5
    scores = np.ones(256)
    scores[9] = -1.0
    assert rank_of(scores, 9) == 255.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=256, max_size=256))
def test_mid_rank_sum_invariant(vals):
    scores = np.array(vals, dtype=float)
    total = sum(rank_of(scores, c) for c in range(256))
    assert total == 256 * 255 / 2


def test_mean_rank_examples():
    uni = np.full(256, 1.0)
    assert mean_rank([(uni, c) for c in range(16)]) == 127.5
    perfect = np.zeros(256)
    perfect[5] = 2.0
    assert mean_rank([(perfect, 5)] * 4) == 0.0
    mixed = [(uni, 0), (perfect, 5)]
    assert mean_rank(mixed) == 63.75
    with pytest.raises(AnalysisError):
        mean_rank([])


# ------------------------------------------------------ disclosure loop

class FakeScorer:
    """Returns rigged (16, 256) score matrices keyed by processed count."""

    def __init__(self, plan):
        self.plan = plan  # list of (threshold, matrix) sorted ascending
        self.processed = 0

    def feed(self, chunk):
        self.processed += len(chunk)
        return len(chunk)

    def scores(self):
        current = self.plan[0][1]
        for threshold, matrix in self.plan:
            if self.processed >= threshold:
                current = matrix
        return current


def perfect_matrix(key):
    m = np.zeros((16, 256))
    for b in range(16):
        m[b, key[b]] = 1.0
    return m


def test_disclosure_immediate():
    key = list(range(16))
    scorer = FakeScorer([(0, perfect_matrix(key))])
    res = traces_to_disclosure(
        [np.zeros(500), np.zeros(500), np.zeros(500)],
        scorer.feed, scorer.scores, key, checkpoint_interval=1000, budget=3000)
    assert res.full_key == 1000
    assert res.per_byte == [1000] * 16
    assert res.checkpoints == [1000]
    assert res.disclosed


def test_disclosure_never_uniform():
    key = list(range(16))
    scorer = FakeScorer([(0, np.ones((16, 256)))])
    res = traces_to_disclosure(
        iter([np.zeros(1000)] * 10), scorer.feed, scorer.scores, key,
        checkpoint_interval=1000, budget=5000)
    assert res.full_key == math.inf
    assert res.per_byte == [math.inf] * 16
    assert not res.disclosed
    assert res.checkpoints == [1000, 2000, 3000, 4000, 5000]


def test_disclosure_tie_counts_as_failure():
    key = list(range(16))
    tied = perfect_matrix(key)
    tied[0, 200] = 1.0  # byte 0 ties with a wrong candidate
    scorer = FakeScorer([(0, tied)])
    res = traces_to_disclosure([np.zeros(1000)] * 2, scorer.feed, scorer.scores,
                               key, budget=2000)
    assert res.full_key == math.inf
    assert res.per_byte[0] == math.inf
    assert res.per_byte[1] == 1000


def test_disclosure_partial_then_full():
    key = list(range(16))
    partial = perfect_matrix(key)
    partial[3] = 0.0  # byte 3 undecided early
    scorer = FakeScorer([(0, partial), (3000, perfect_matrix(key))])
    res = traces_to_disclosure([np.zeros(1000)] * 6, scorer.feed, scorer.scores,
                               key, budget=6000)
    assert res.per_byte[0] == 1000
    assert res.per_byte[3] == 3000
    assert res.full_key == 3000
    assert res.checkpoints == [1000, 2000, 3000]


def test_disclosure_end_of_stream_checkpoint():
    key = list(range(16))
    scorer = FakeScorer([(0, perfect_matrix(key))])
    res = traces_to_disclosure([np.zeros(700)], scorer.feed, scorer.scores,
                               key, checkpoint_interval=1000)
    assert res.checkpoints == [700]
    assert res.full_key == 700
