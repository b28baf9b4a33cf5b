"""Rating-prediction and top-K ranking metrics for leave-one-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass
class RankedEval:
    """One user's candidate list with model scores."""

    test_item: int
    candidates: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.candidates.shape != self.scores.shape:
            raise ValueError("candidates and scores differ in shape")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def mse(pairs: Iterable[tuple[float, float]]) -> float:
    arr = np.asarray(list(pairs), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mse of no pairs")
    return float(np.mean((arr[:, 0] - arr[:, 1]) ** 2))


def rank_of_test_item(ev: RankedEval) -> int:
    """1-based rank by descending score; equal scores order by ascending item id."""
    hit = np.flatnonzero(ev.candidates == ev.test_item)
    if hit.size == 0:
        raise ValueError(f"test item {ev.test_item} not among candidates")
    s = ev.scores[hit[0]]
    ahead = np.sum(ev.scores > s) + np.sum((ev.scores == s) & (ev.candidates < ev.test_item))
    return int(ahead) + 1


def ranks_from_matrix(scores: np.ndarray, candidates: np.ndarray, test_col: int = 0) -> np.ndarray:
    """Vectorised :func:`rank_of_test_item` for rows sharing a test-item column.

    Rows may be padded with candidate id -1; padded slots never outrank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.int64)
    s = scores[:, test_col : test_col + 1]
    c = candidates[:, test_col : test_col + 1]
    valid = candidates >= 0
    ahead = ((scores > s) | ((scores == s) & (candidates < c))) & valid
    return ahead.sum(axis=1) + 1


def hr_at_k(ranks: Sequence[int], k: int = 10) -> float:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(r <= k))


def ndcg_at_k(ranks: Sequence[int], k: int = 10) -> float:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks")
    gain = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(np.mean(gain))
