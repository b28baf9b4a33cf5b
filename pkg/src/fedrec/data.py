"""Rating data: MovieLens ingestion, non-iid client partitions, sampling."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

RATING_SUPPORT = (1, 2, 3, 4, 5)
MAX_RATING = 5.0


class DataError(ValueError):
    """Raised for unreadable or malformed rating data."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int


@dataclass
class IdMap:
    """Dense re-indexing of raw MovieLens ids."""

    users: dict[int, int]
    items: dict[int, int]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)


@dataclass
class ClientPartition:
    client_id: int
    interactions: list[Interaction]
    local_user_ids: frozenset[int]

    def __post_init__(self) -> None:
        if not self.interactions:
            raise ValueError(f"client {self.client_id} has no interactions")
        stray = {x.user_id for x in self.interactions} - self.local_user_ids
        if stray:
            raise ValueError(f"client {self.client_id} holds foreign users {sorted(stray)[:5]}")


@dataclass(frozen=True)
class RatingHistogram:
    mass: np.ndarray
    support: tuple[int, ...] = RATING_SUPPORT

    def __getitem__(self, rating: int) -> float:
        return float(self.mass[self.support.index(rating)])


@dataclass(frozen=True)
class TrainInstance:
    user_id: int
    item_id: int
    label: float
    weight: float = 1.0


@dataclass
class TrainBatch:
    """Columnar collection of training instances."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.users = np.ascontiguousarray(self.users, dtype=np.int64)
        self.items = np.ascontiguousarray(self.items, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        n = self.users.size
        if not (self.items.size == self.labels.size == self.weights.size == n):
            raise ValueError("batch columns differ in length")

    def __len__(self) -> int:
        return int(self.users.size)

    def __getitem__(self, idx) -> TrainInstance | TrainBatch:
        if isinstance(idx, (int, np.integer)):
            return TrainInstance(
                int(self.users[idx]), int(self.items[idx]), float(self.labels[idx]), float(self.weights[idx])
            )
        return TrainBatch(self.users[idx], self.items[idx], self.labels[idx], self.weights[idx])

    def __iter__(self) -> Iterator[TrainInstance]:
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def from_instances(cls, instances: Iterable[TrainInstance]) -> TrainBatch:
        rows = list(instances)
        return cls(
            np.array([r.user_id for r in rows], dtype=np.int64),
            np.array([r.item_id for r in rows], dtype=np.int64),
            np.array([r.label for r in rows], dtype=np.float64),
            np.array([r.weight for r in rows], dtype=np.float64),
        )

    @classmethod
    def empty(cls) -> TrainBatch:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class SkewConfig:
    """Non-iid controls for :func:`partition_clients`.

    ``size_sigma`` is the log-normal spread of per-client user counts;
    ``rating_bias`` in [0, 1] blends random user assignment (0) with
    assignment ordered by each user's mean rating (1), which concentrates
    rating preferences per client.
    """

    size_sigma: float = 0.0
    rating_bias: float = 0.0

    @classmethod
    def uniform(cls) -> SkewConfig:
        return cls(0.0, 0.0)


def load_movielens(path: str | Path) -> tuple[list[Interaction], IdMap]:
    """Parse a ``UserID::MovieID::Rating::Timestamp`` file with dense re-indexing."""
    path = Path(path)
    users: dict[int, int] = {}
    items: dict[int, int] = {}
    out: list[Interaction] = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 '::'-separated fields, got {len(parts)}")
            try:
                raw_u, raw_i, rating, ts = int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer field ({exc})") from None
            if rating not in RATING_SUPPORT:
                raise DataError(f"{path}:{lineno}: rating {rating} outside 1..5")
            u = users.setdefault(raw_u, len(users))
            i = items.setdefault(raw_i, len(items))
            out.append(Interaction(u, i, float(rating), ts))
    if not out:
        raise DataError(f"{path}: no interactions")
    return out, IdMap(users, items)


def synthetic_interactions(
    n_users: int,
    n_items: int,
    per_user: int,
    seed: int,
    factors: int = 4,
    noise: float | Sequence[float] = 0.0,
) -> list[Interaction]:
    """Ratings from a low-rank preference model with optional rating noise.

    ``noise`` may be a per-user sequence; a user with noise ``p`` has each
    rating replaced by a uniform draw from 1..5 with probability ``p``.
    Items are drawn with a popularity skew so ranking is learnable.
    """
    rng = np.random.default_rng(seed)
    per_user = min(per_user, n_items)
    u_f = rng.normal(0, 1, (n_users, factors))
    i_f = rng.normal(0, 1, (n_items, factors))
    bias = rng.normal(0, 1, n_items)
    pop = np.exp(-np.arange(n_items) / max(1.0, n_items / 4))
    pop = pop[rng.permutation(n_items)]
    pop /= pop.sum()
    noise_arr = np.broadcast_to(np.asarray(noise, dtype=float), (n_users,))
    out = []
    for u in range(n_users):
        items = rng.choice(n_items, size=per_user, replace=False, p=pop)
        score = (i_f[items] @ u_f[u]) / math.sqrt(factors) + 0.5 * bias[items]
        ratings = np.clip(np.rint(3.5 + 0.8 * score), 1, 5)
        flip = rng.random(per_user) < noise_arr[u]
        ratings[flip] = rng.integers(1, 6, flip.sum())
        ts = np.sort(rng.integers(0, 10**6, per_user))
        order = rng.permutation(per_user)
        for k in order:
            out.append(Interaction(u, int(items[k]), float(ratings[k]), int(ts[k])))
    return out


def _split_counts(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` into ``len(weights)`` parts, each >= 1."""
    k = weights.size
    spare = total - k
    share = weights / weights.sum() * spare
    counts = np.floor(share).astype(int)
    rem = spare - counts.sum()
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts + 1


def partition_clients(
    interactions: Sequence[Interaction],
    n_clients: int,
    skew: SkewConfig | None = None,
    seed: int = 0,
) -> list[ClientPartition]:
    """Assign whole users to clients; every user lands on exactly one client."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    skew = skew or SkewConfig.uniform()
    by_user: dict[int, list[Interaction]] = defaultdict(list)
    for x in interactions:
        by_user[x.user_id].append(x)
    users = np.array(sorted(by_user), dtype=np.int64)
    if n_clients > users.size:
        raise ValueError(f"{n_clients} clients but only {users.size} distinct users")

    rng = np.random.default_rng(seed)
    weights = rng.lognormal(0.0, skew.size_sigma, n_clients) if skew.size_sigma > 0 else np.ones(n_clients)
    counts = _split_counts(users.size, weights)

    mean_rating = np.array([np.mean([x.rating for x in by_user[u]]) for u in users])
    spread = mean_rating.std()
    z = (mean_rating - mean_rating.mean()) / spread if spread > 0 else np.zeros(users.size)
    score = skew.rating_bias * z + (1.0 - skew.rating_bias) * rng.normal(0, 1, users.size)
    ordered = users[np.argsort(score, kind="stable")]

    # Contiguous chunks of the score order, handed to clients in random order
    # so that size and rating bias are independent.
    slot_order = rng.permutation(n_clients)
    bounds = np.concatenate([[0], np.cumsum(counts[slot_order])])
    parts = []
    for pos, cid in enumerate(slot_order):
        chunk = ordered[bounds[pos] : bounds[pos + 1]]
        parts.append((int(cid), chunk))
    parts.sort()
    out = []
    for cid, chunk in parts:
        members = sorted(int(u) for u in chunk)
        rows = [x for u in members for x in by_user[u]]
        out.append(ClientPartition(cid, rows, frozenset(members)))
    return out


def partition_by_user_blocks(interactions: Sequence[Interaction], n_clients: int) -> list[ClientPartition]:
    """Deterministic partition: users split into ``n_clients`` contiguous id blocks."""
    by_user: dict[int, list[Interaction]] = defaultdict(list)
    for x in interactions:
        by_user[x.user_id].append(x)
    users = sorted(by_user)
    if n_clients > len(users):
        raise ValueError(f"{n_clients} clients but only {len(users)} distinct users")
    blocks = np.array_split(np.arange(len(users)), n_clients)
    out = []
    for cid, block in enumerate(blocks):
        members = [users[k] for k in block]
        out.append(ClientPartition(cid, [x for u in members for x in by_user[u]], frozenset(members)))
    return out


def leave_one_out_split(partition: ClientPartition) -> tuple[list[Interaction], list[Interaction]]:
    """Hold out each user's latest interaction (ties: larger item id)."""
    by_user: dict[int, list[Interaction]] = defaultdict(list)
    for x in partition.interactions:
        by_user[x.user_id].append(x)
    train: list[Interaction] = []
    test: list[Interaction] = []
    for u in sorted(by_user):
        rows = by_user[u]
        if len(rows) < 2:
            train.extend(rows)
            continue
        last = max(range(len(rows)), key=lambda k: (rows[k].timestamp, rows[k].item_id))
        test.append(rows[last])
        train.extend(r for k, r in enumerate(rows) if k != last)
    return train, test


def _interacted(train: Sequence[Interaction]) -> dict[int, set[int]]:
    seen: dict[int, set[int]] = defaultdict(set)
    for x in train:
        seen[x.user_id].add(x.item_id)
    return seen


def sample_negatives(
    train: Sequence[Interaction], ratio: int, n_items: int, seed, weight: float = 1.0
) -> TrainBatch:
    """Positives labelled ``rating / 5`` plus ``ratio`` unseen items (label 0) per positive."""
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    rng = np.random.default_rng(seed)
    seen = _interacted(train)
    users = [np.array([x.user_id for x in train], dtype=np.int64)]
    items = [np.array([x.item_id for x in train], dtype=np.int64)]
    labels = [np.array([x.rating / MAX_RATING for x in train])]
    if ratio > 0:
        per_user: dict[int, int] = defaultdict(int)
        for x in train:
            per_user[x.user_id] += 1
        mask = np.zeros(n_items, dtype=bool)
        for u in sorted(per_user):
            got = _negative_block(rng, seen[u], mask, n_items, per_user[u], ratio)
            users.append(np.full(got.size, u, dtype=np.int64))
            items.append(got)
            labels.append(np.zeros(got.size))
    u_all = np.concatenate(users)
    return TrainBatch(u_all, np.concatenate(items), np.concatenate(labels), np.full(u_all.size, weight))


def _negative_block(
    rng: np.random.Generator, seen: set[int], mask: np.ndarray, n_items: int, n_pos: int, ratio: int
) -> np.ndarray:
    """``n_pos`` rows of distinct unseen items, ``min(ratio, #unseen)`` per row, flattened."""
    want = min(ratio, n_items - len(seen))
    if want <= 0:
        return np.zeros(0, dtype=np.int64)
    seen_arr = np.fromiter(seen, dtype=np.int64, count=len(seen))
    mask[seen_arr] = True
    try:
        if len(seen) > n_items // 2:
            pool = np.flatnonzero(~mask)
            return np.concatenate([rng.choice(pool, size=want, replace=False) for _ in range(n_pos)])
        draws = rng.integers(n_items, size=(n_pos, want))
        while True:
            bad = mask[draws]
            # Duplicates within a row: flag every repeat after the first.
            srt = np.sort(draws, axis=1)
            if want > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
                for r in np.flatnonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1)):
                    _, first = np.unique(draws[r], return_index=True)
                    dup = np.ones(want, dtype=bool)
                    dup[first] = False
                    bad[r] |= dup
            if not bad.any():
                return draws.ravel()
            draws[bad] = rng.integers(n_items, size=int(bad.sum()))
    finally:
        mask[seen_arr] = False


def _draw_unseen(rng: np.random.Generator, seen: set[int], n_items: int, k: int) -> list[int]:
    """``k`` distinct items outside ``seen``; rejection sampling, exact fallback when dense."""
    if len(seen) > n_items // 2:
        pool = np.setdiff1d(np.arange(n_items), np.fromiter(seen, dtype=np.int64, count=len(seen)))
        return [int(v) for v in rng.choice(pool, size=k, replace=False)]
    picks: list[int] = []
    taken: set[int] = set()
    while len(picks) < k:
        j = int(rng.integers(n_items))
        if j in seen or j in taken:
            continue
        taken.add(j)
        picks.append(j)
    return picks


def sample_eval_candidates(
    user_id: int,
    test_item: int,
    train: Sequence[Interaction] | set[int],
    k: int,
    n_items: int,
    seed,
) -> list[int]:
    """The test item followed by up to ``k`` items the user never touched.

    ``train`` may be the user's training interactions or a pre-built set of
    item ids they interacted with.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if isinstance(train, (set, frozenset)):
        seen = set(train)
    else:
        seen = {x.item_id for x in train if x.user_id == user_id}
    seen.add(test_item)
    want = min(k, n_items - len(seen))
    if want <= 0:
        return [test_item]
    rng = np.random.default_rng(seed)
    return [test_item] + _draw_unseen(rng, seen, n_items, want)


def rating_histogram(interactions: Iterable[Interaction], support: tuple[int, ...] = RATING_SUPPORT) -> RatingHistogram:
    counts = np.zeros(len(support))
    index = {r: k for k, r in enumerate(support)}
    for x in interactions:
        counts[index[int(x.rating)]] += 1
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot build a histogram from no interactions")
    return RatingHistogram(counts / total, support)


@dataclass
class ClientData:
    """A client's prepared data: split, seen-item sets, evaluation candidates."""

    partition: ClientPartition
    train: list[Interaction]
    test: list[Interaction]
    seen: dict[int, set[int]] = field(default_factory=dict)

    @classmethod
    def prepare(cls, partition: ClientPartition) -> ClientData:
        train, test = leave_one_out_split(partition)
        return cls(partition, train, test, _interacted(train))

    @property
    def client_id(self) -> int:
        return self.partition.client_id

    @property
    def size(self) -> int:
        return len(self.train)
