from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedrec.metrics import RankedEval, hr_at_k, mse, ndcg_at_k, rank_of_test_item, ranks_from_matrix


def test_mse_cases():
    assert mse([(0.3, 0.3), (0.9, 0.9)]) == 0.0
    assert mse([(0.5, 1.0)]) == 0.25
    assert mse([(y + 0.1, y) for y in np.linspace(0, 1, 7)]) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        mse([])


class TestRank:
    def test_unique_max(self):
        assert rank_of_test_item(RankedEval(7, np.arange(51), np.r_[np.zeros(7), 1.0, np.zeros(43)])) == 1

    def test_unique_min(self):
        s = np.ones(51)
        s[0] = -1
        assert rank_of_test_item(RankedEval(0, np.arange(51), s)) == 51

    def test_ties_by_item_id(self):
        assert rank_of_test_item(RankedEval(0, np.arange(51), np.zeros(51))) == 1
        assert rank_of_test_item(RankedEval(5, np.arange(51), np.zeros(51))) == 6

    def test_missing_test_item(self):
        with pytest.raises(ValueError):
            rank_of_test_item(RankedEval(99, np.arange(5), np.zeros(5)))

    def test_matrix_matches_scalar(self):
        r = np.random.default_rng(0)
        cands = np.array([r.permutation(100)[:11] for _ in range(30)])
        scores = r.integers(0, 4, cands.shape).astype(float)
        want = [rank_of_test_item(RankedEval(c[0], c, s)) for c, s in zip(cands, scores)]
        assert ranks_from_matrix(scores, cands).tolist() == want

    def test_padding_never_outranks(self):
        cands = np.array([[4, 2, -1, -1]])
        scores = np.array([[0.1, 0.0, -np.inf, -np.inf]])
        assert ranks_from_matrix(scores, cands).tolist() == [1]


def test_hr_cases():
    assert hr_at_k([1, 1, 1]) == 1.0
    assert hr_at_k([5, 15], 10) == 0.5
    assert hr_at_k([3, 7, 50], 50) == 1.0


def test_ndcg_contributions():
    assert ndcg_at_k([1]) == 1.0
    assert ndcg_at_k([3]) == 0.5
    assert ndcg_at_k([11], 10) == 0.0
    assert ndcg_at_k([2]) == pytest.approx(1 / math.log2(3))


@given(st.lists(st.integers(1, 60), min_size=1, max_size=50), st.integers(1, 20))
def test_ndcg_bounded_by_hr(ranks, k):
    assert ndcg_at_k(ranks, k) <= hr_at_k(ranks, k) + 1e-15


@given(st.lists(st.integers(1, 60), min_size=1, max_size=30), st.data())
def test_metrics_monotone_in_rank(ranks, data):
    pos = data.draw(st.integers(0, len(ranks) - 1))
    worse = list(ranks)
    worse[pos] += data.draw(st.integers(1, 10))
    assert hr_at_k(worse) <= hr_at_k(ranks)
    assert ndcg_at_k(worse) <= ndcg_at_k(ranks)


def test_random_scorer_baseline():
    r = np.random.default_rng(2024)
    trials = 20_000
    scores = r.random((trials, 51))
    ranks = ranks_from_matrix(scores, np.tile(np.arange(51), (trials, 1)))
    assert abs(hr_at_k(ranks) - 10 / 51) < 0.02
