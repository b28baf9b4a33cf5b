"""Round-based federated training: user embeddings never leave a client."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from fedrec import metrics, neumf
from fedrec.data import ClientData, TrainBatch, sample_eval_candidates, sample_negatives
from fedrec.ledger import SERVER_ACTOR, Ledger, PayloadType, sha256
from fedrec.neumf import Hyperparams, NeuMFParams, serialize_arrays

log = logging.getLogger(__name__)

SHARED_FIELDS = ("item_emb_gmf", "item_emb_mlp", "mlp_weights", "mlp_biases", "output_weights")
USER_FIELDS = ("user_emb_gmf", "user_emb_mlp")


@dataclass
class SharedParams:
    item_emb_gmf: np.ndarray
    item_emb_mlp: np.ndarray
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]
    output_weights: np.ndarray

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("item_emb_gmf", self.item_emb_gmf), ("item_emb_mlp", self.item_emb_mlp)]
        for k, (w, b) in enumerate(zip(self.mlp_weights, self.mlp_biases)):
            out.append((f"mlp_weights.{k}", w))
            out.append((f"mlp_biases.{k}", b))
        out.append(("output_weights", self.output_weights))
        return out

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for _, a in self.named_arrays()]

    def copy(self) -> SharedParams:
        return SharedParams(
            self.item_emb_gmf.copy(),
            self.item_emb_mlp.copy(),
            [w.copy() for w in self.mlp_weights],
            [b.copy() for b in self.mlp_biases],
            self.output_weights.copy(),
        )

    def to_bytes(self) -> bytes:
        return serialize_arrays(self.named_arrays())

    def digest(self) -> bytes:
        return sha256(self.to_bytes())


@dataclass
class ClientState:
    client_id: int
    params: NeuMFParams
    data: ClientData
    eval_users: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    eval_candidates: np.ndarray = field(default_factory=lambda: np.zeros((0, 1), np.int64))
    eval_ratings: np.ndarray = field(default_factory=lambda: np.zeros(0))
    round_batch: TrainBatch | None = None

    @property
    def n_k(self) -> int:
        return self.data.size


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    upload_digests: dict[int, bytes]
    aggregate_digest: bytes
    sizes: dict[int, int]


@dataclass
class RoundMetrics:
    round: int
    global_loss: float
    hr: float | None = None
    ndcg: float | None = None
    mse: float | None = None


@dataclass
class FederationResult:
    shared: SharedParams
    clients: list[ClientState]
    metrics: list[RoundMetrics]
    records: list[RoundRecord]


def extract_shared(params: NeuMFParams) -> SharedParams:
    return SharedParams(
        params.item_emb_gmf.copy(),
        params.item_emb_mlp.copy(),
        [w.copy() for w in params.mlp_weights],
        [b.copy() for b in params.mlp_biases],
        params.output_weights.copy(),
    )


def _check_congruent(reference: Sequence[tuple[int, ...]], shared: SharedParams) -> None:
    got = shared.shapes()
    if list(reference) != got:
        raise ValueError(f"shared parameter shapes {got} do not match {list(reference)}")


def apply_shared(params: NeuMFParams, shared: SharedParams) -> NeuMFParams:
    """New parameter set: shared tensors from ``shared``, user embeddings kept (same arrays)."""
    ref = [a.shape for name, a in params.named_arrays() if not name.startswith("user_emb")]
    _check_congruent(ref, shared)
    return NeuMFParams(
        params.user_emb_gmf,
        shared.item_emb_gmf.copy(),
        params.user_emb_mlp,
        shared.item_emb_mlp.copy(),
        [w.copy() for w in shared.mlp_weights],
        [b.copy() for b in shared.mlp_biases],
        shared.output_weights.copy(),
    )


def apply_global(client: ClientState, shared: SharedParams) -> ClientState:
    return replace(client, params=apply_shared(client.params, shared))


def fedavg(uploads: Sequence[tuple[SharedParams, int]]) -> SharedParams:
    """Dataset-size weighted mean of every shared tensor."""
    if not uploads:
        raise ValueError("fedavg needs at least one upload")
    ref = uploads[0][0].shapes()
    for sp, n_k in uploads:
        _check_congruent(ref, sp)
        if n_k <= 0:
            raise ValueError("dataset sizes must be positive")
    if len(uploads) == 1:
        return uploads[0][0].copy()
    n = float(sum(n_k for _, n_k in uploads))
    acc = [np.zeros(shape) for shape in ref]
    for sp, n_k in uploads:
        w = n_k / n
        for a, (_, t) in zip(acc, sp.named_arrays()):
            a += w * t
    layers = len(uploads[0][0].mlp_weights)
    ws = [acc[2 + 2 * k] for k in range(layers)]
    bs = [acc[3 + 2 * k] for k in range(layers)]
    return SharedParams(acc[0], acc[1], ws, bs, acc[-1])


def client_loss(client: ClientState, shared: SharedParams, batch: TrainBatch | None = None) -> float:
    batch = batch if batch is not None else client.round_batch
    if batch is None or len(batch) == 0:
        raise ValueError(f"client {client.client_id} has no evaluation batch")
    return neumf.mean_loss(apply_shared(client.params, shared), batch)


def global_loss(clients: Sequence[ClientState], shared: SharedParams) -> float:
    """Unweighted mean over clients of each client's per-instance loss."""
    if not clients:
        raise ValueError("global loss over no clients")
    return float(np.mean([client_loss(c, shared) for c in clients]))


# -- setup --------------------------------------------------------------------


def build_clients(
    datas: Sequence[ClientData],
    n_users: int,
    n_items: int,
    hyper: Hyperparams,
    seed: int,
    eval_negatives: int = 50,
) -> tuple[list[ClientState], SharedParams]:
    """Initial client states plus the server's initial shared model."""
    global_params = neumf.init_params(n_users, n_items, hyper, [seed, 0])
    shared0 = extract_shared(global_params)
    clients = []
    for cd in datas:
        ug, um = neumf.init_user_embeddings(n_users, hyper.factors, [seed, 1, cd.client_id])
        params = apply_shared(
            NeuMFParams(ug, global_params.item_emb_gmf, um, global_params.item_emb_mlp,
                        global_params.mlp_weights, global_params.mlp_biases, global_params.output_weights),
            shared0,
        )
        users, cands, ratings = [], [], []
        for x in cd.test:
            c = sample_eval_candidates(x.user_id, x.item_id, cd.seen.get(x.user_id, set()), eval_negatives,
                                       n_items, [seed, 2, x.user_id])
            users.append(x.user_id)
            cands.append(c + [-1] * (eval_negatives + 1 - len(c)))
            ratings.append(x.rating)
        clients.append(
            ClientState(
                cd.client_id,
                params,
                cd,
                np.array(users, dtype=np.int64),
                np.array(cands, dtype=np.int64).reshape(len(users), eval_negatives + 1),
                np.array(ratings, dtype=np.float64),
            )
        )
    return clients, shared0


def round_batch(client: ClientState, hyper: Hyperparams, n_items: int, seed: int, round_idx: int) -> TrainBatch:
    return sample_negatives(client.data.train, hyper.neg_ratio, n_items, [seed, 3, round_idx, client.client_id])


# -- protocol -------------------------------------------------------------------


def run_round(
    selected: Sequence[ClientState],
    shared: SharedParams,
    hyper: Hyperparams,
    ledger: Ledger | None,
    seed: int,
    round_idx: int = 0,
    backend: str | None = None,
) -> tuple[SharedParams, list[ClientState], RoundRecord]:
    """Broadcast, local training, on-chain uploads, FedAvg, on-chain aggregate."""
    if not selected:
        raise ValueError("a round needs at least one participant")
    n_items = shared.item_emb_gmf.shape[0]
    trained: list[ClientState] = []
    uploads: list[tuple[SharedParams, int]] = []
    for client in sorted(selected, key=lambda c: c.client_id):
        local = apply_global(client, shared)
        batch = round_batch(local, hyper, n_items, seed, round_idx)
        params = neumf.train_local(local.params, batch, hyper, [seed, 4, round_idx, client.client_id], backend=backend)
        local = replace(local, params=params, round_batch=batch)
        trained.append(local)
        uploads.append((extract_shared(params), local.n_k))

    digests: dict[int, bytes] = {}
    for client, (up, _) in zip(trained, uploads):
        payload = up.to_bytes()
        digests[client.client_id] = sha256(payload)
        if ledger is not None:
            ledger.record(PayloadType.LOCAL_UPDATE, client.client_id, round_idx, payload)

    aggregate = fedavg(uploads)
    payload = aggregate.to_bytes()
    if ledger is not None:
        ledger.record(PayloadType.GLOBAL_MODEL, SERVER_ACTOR, round_idx, payload)
    record = RoundRecord(
        round_idx,
        [c.client_id for c in trained],
        digests,
        sha256(payload),
        {c.client_id: c.n_k for c in trained},
    )
    return aggregate, trained, record


def run_federation(
    clients: Sequence[ClientState],
    shared: SharedParams,
    rounds: int,
    hyper: Hyperparams,
    ledger: Ledger | None,
    seed: int,
    participants: Sequence[int] | None = None,
    evaluate_each_round: bool = False,
    backend: str | None = None,
) -> FederationResult:
    """``rounds`` synchronous rounds over the participating clients.

    Non-participants keep their initial state; every client is returned so
    the final model can be evaluated on all of them.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    states = {c.client_id: c for c in clients}
    chosen = sorted(states) if participants is None else sorted(int(p) for p in participants)
    if not chosen:
        raise ValueError("no participating clients")
    history: list[RoundMetrics] = []
    records: list[RoundRecord] = []
    for t in range(rounds):
        shared, trained, record = run_round([states[k] for k in chosen], shared, hyper, ledger, seed, t, backend)
        for c in trained:
            states[c.client_id] = c
        records.append(record)
        loss_t = global_loss(trained, shared)
        row = RoundMetrics(t, loss_t)
        if evaluate_each_round:
            ev = evaluate(list(states.values()), shared)
            row.hr, row.ndcg, row.mse = ev.hr, ev.ndcg, ev.mse
        log.info("round %d: global loss %.6f", t, loss_t)
        history.append(row)
    return FederationResult(shared, [states[k] for k in sorted(states)], history, records)


@dataclass
class Evaluation:
    hr: float
    ndcg: float
    mse: float
    n_users: int


def evaluate(clients: Sequence[ClientState], shared: SharedParams, k: int = 10) -> Evaluation:
    """HR@k, NDCG@k over every client's held-out users, plus test-rating MSE."""
    ranks, preds, truth = [], [], []
    for c in clients:
        if c.eval_users.size == 0:
            continue
        params = apply_shared(c.params, shared)
        cands = c.eval_candidates
        users = np.repeat(c.eval_users, cands.shape[1])
        safe = np.where(cands >= 0, cands, 0).ravel()
        scores = neumf.predict(params, users, safe).reshape(cands.shape)
        scores = np.where(cands >= 0, scores, -np.inf)
        ranks.append(metrics.ranks_from_matrix(scores, cands, test_col=0))
        preds.append(scores[:, 0])
        truth.append(c.eval_ratings / 5.0)
    if not ranks:
        raise ValueError("no held-out users to evaluate")
    r = np.concatenate(ranks)
    return Evaluation(
        metrics.hr_at_k(r, k),
        metrics.ndcg_at_k(r, k),
        metrics.mse(zip(np.concatenate(preds), np.concatenate(truth))),
        int(r.size),
    )


def contains_user_embedding(payload: bytes, n_users: int, factors: int) -> bool:
    """Shape audit of a serialised parameter payload."""
    for name, arr in neumf.deserialize_arrays(payload):
        if name.startswith("user_emb") or arr.shape == (n_users, factors):
            return True
    return False
