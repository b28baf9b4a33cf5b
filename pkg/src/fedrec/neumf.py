"""NeuMF: GMF and MLP towers merged through a sigmoid output.

Parameters are plain NumPy arrays; training is hand-written backprop
with either plain gradient descent or Adam. Embedding rows are updated
lazily (only the rows a batch touches), so a client never moves the
embeddings of users or items it did not see in a step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from fedrec import _fallback, kernels
from fedrec.data import TrainBatch, TrainInstance

OPTIMIZERS = ("sgd", "adam")
EMBEDDING_STD = 0.1  # variance 0.01


@dataclass(frozen=True)
class Hyperparams:
    factors: int = 32
    mlp_layers: tuple[int, ...] = (64, 32, 16)
    learning_rate: float = 5e-4
    batch_size: int = 64
    local_epochs: int = 5
    optimizer: str = "adam"
    neg_ratio: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.factors < 1 or self.batch_size < 1 or self.local_epochs < 0 or self.neg_ratio < 0:
            raise ValueError("factors and batch_size must be positive, epochs and neg_ratio non-negative")
        if not self.mlp_layers or any(w < 1 for w in self.mlp_layers):
            raise ValueError("mlp_layers must be a non-empty list of positive widths")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (2 * self.factors, *self.mlp_layers)


@dataclass
class NeuMFParams:
    user_emb_gmf: np.ndarray
    item_emb_gmf: np.ndarray
    user_emb_mlp: np.ndarray
    item_emb_mlp: np.ndarray
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]
    output_weights: np.ndarray

    @property
    def n_users(self) -> int:
        return self.user_emb_gmf.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb_gmf.shape[0]

    @property
    def factors(self) -> int:
        return self.user_emb_gmf.shape[1]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.mlp_weights[0].shape[0], *(w.shape[1] for w in self.mlp_weights))

    def validate(self) -> None:
        d = self.factors
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if self.user_emb_mlp.shape != self.user_emb_gmf.shape or self.item_emb_mlp.shape != self.item_emb_gmf.shape:
            raise ValueError("GMF and MLP embeddings differ in shape")
        if self.item_emb_gmf.shape[1] != d:
            raise ValueError("user and item factors differ")
        if self.mlp_weights[0].shape[0] != 2 * d:
            raise ValueError("first MLP layer must take 2*d inputs")
        for k, (w, b) in enumerate(zip(self.mlp_weights, self.mlp_biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias {k} does not match weight {k}")
            if k and w.shape[0] != self.mlp_weights[k - 1].shape[1]:
                raise ValueError(f"MLP layer {k} input width does not chain")
        if self.output_weights.shape != (d + self.mlp_weights[-1].shape[1],):
            raise ValueError("output weights must have length d + last MLP width")

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [
            ("user_emb_gmf", self.user_emb_gmf),
            ("item_emb_gmf", self.item_emb_gmf),
            ("user_emb_mlp", self.user_emb_mlp),
            ("item_emb_mlp", self.item_emb_mlp),
        ]
        for k, (w, b) in enumerate(zip(self.mlp_weights, self.mlp_biases)):
            out.append((f"mlp_weights.{k}", w))
            out.append((f"mlp_biases.{k}", b))
        out.append(("output_weights", self.output_weights))
        return out

    def copy(self) -> NeuMFParams:
        return NeuMFParams(
            self.user_emb_gmf.copy(),
            self.item_emb_gmf.copy(),
            self.user_emb_mlp.copy(),
            self.item_emb_mlp.copy(),
            [w.copy() for w in self.mlp_weights],
            [b.copy() for b in self.mlp_biases],
            self.output_weights.copy(),
        )

    def to_bytes(self) -> bytes:
        return serialize_arrays(self.named_arrays())


@dataclass
class GradientSet:
    """Gradients of the summed loss; embedding gradients only for the listed rows."""

    user_rows: np.ndarray
    item_rows: np.ndarray
    user_emb_gmf: np.ndarray
    item_emb_gmf: np.ndarray
    user_emb_mlp: np.ndarray
    item_emb_mlp: np.ndarray
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]
    output_weights: np.ndarray

    def dense(self, params: NeuMFParams) -> NeuMFParams:
        """Full-shape gradient laid out like ``params`` (zero rows where untouched)."""
        out = NeuMFParams(
            np.zeros_like(params.user_emb_gmf),
            np.zeros_like(params.item_emb_gmf),
            np.zeros_like(params.user_emb_mlp),
            np.zeros_like(params.item_emb_mlp),
            [w.copy() for w in self.mlp_weights],
            [b.copy() for b in self.mlp_biases],
            self.output_weights.copy(),
        )
        out.user_emb_gmf[self.user_rows] = self.user_emb_gmf
        out.user_emb_mlp[self.user_rows] = self.user_emb_mlp
        out.item_emb_gmf[self.item_rows] = self.item_emb_gmf
        out.item_emb_mlp[self.item_rows] = self.item_emb_mlp
        return out

    def scaled(self, factor: float) -> GradientSet:
        return GradientSet(
            self.user_rows,
            self.item_rows,
            self.user_emb_gmf * factor,
            self.item_emb_gmf * factor,
            self.user_emb_mlp * factor,
            self.item_emb_mlp * factor,
            [w * factor for w in self.mlp_weights],
            [b * factor for b in self.mlp_biases],
            self.output_weights * factor,
        )


@dataclass
class OptState:
    """Adam moments, full-shape per tensor, plus the step counter."""

    t: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: NeuMFParams) -> OptState:
        return cls(0, {name: (np.zeros_like(a), np.zeros_like(a)) for name, a in params.named_arrays()})


# -- canonical serialisation ---------------------------------------------------


def serialize_arrays(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """``u32 count`` then per array: ``u32 name_len, name, u32 ndim, u64 dims..., f64le data``."""
    named = list(named)
    parts = [struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def deserialize_arrays(data: bytes) -> list[tuple[str, np.ndarray]]:
    (count,) = struct.unpack_from("<I", data, 0)
    pos = 4
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        out.append((name, arr))
    if pos != len(data):
        raise ValueError("trailing bytes after serialised arrays")
    return out


# -- construction and forward ---------------------------------------------------


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def kaiming_bound(fan_in: int) -> float:
    # kaiming-uniform with ReLU gain sqrt(2): sqrt(2) * sqrt(3 / fan_in)
    return float(np.sqrt(6.0 / fan_in))


def init_params(n_users: int, n_items: int, hyper: Hyperparams, seed) -> NeuMFParams:
    if n_users < 1 or n_items < 1:
        raise ValueError("need at least one user and one item")
    rng = np.random.default_rng(seed)
    d = hyper.factors
    widths = hyper.widths
    user_g = rng.normal(0.0, EMBEDDING_STD, (n_users, d))
    item_g = rng.normal(0.0, EMBEDDING_STD, (n_items, d))
    user_m = rng.normal(0.0, EMBEDDING_STD, (n_users, d))
    item_m = rng.normal(0.0, EMBEDDING_STD, (n_items, d))
    ws, bs = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        bound = xavier_bound(n_in, n_out)
        ws.append(rng.uniform(-bound, bound, (n_in, n_out)))
        bs.append(np.zeros(n_out))
    fan_in = d + widths[-1]
    bound = kaiming_bound(fan_in)
    h = rng.uniform(-bound, bound, fan_in)
    return NeuMFParams(user_g, item_g, user_m, item_m, ws, bs, h)


def init_user_embeddings(n_users: int, d: int, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, EMBEDDING_STD, (n_users, d)), rng.normal(0.0, EMBEDDING_STD, (n_users, d))


def _check_ids(params: NeuMFParams, users: np.ndarray, items: np.ndarray) -> None:
    if users.size and (users.min() < 0 or users.max() >= params.n_users):
        raise IndexError(f"user id out of range [0, {params.n_users})")
    if items.size and (items.min() < 0 or items.max() >= params.n_items):
        raise IndexError(f"item id out of range [0, {params.n_items})")


def predict(params: NeuMFParams, users, items, chunk: int = 65536) -> np.ndarray:
    """Batched predictions in (0, 1)."""
    users = np.asarray(users, dtype=np.int64).ravel()
    items = np.asarray(items, dtype=np.int64).ravel()
    _check_ids(params, users, items)
    out = np.empty(users.size)
    for lo in range(0, users.size, chunk):
        hi = lo + chunk
        out[lo:hi], _ = _fallback.forward(
            params.user_emb_gmf,
            params.item_emb_gmf,
            params.user_emb_mlp,
            params.item_emb_mlp,
            params.mlp_weights,
            params.mlp_biases,
            params.output_weights,
            users[lo:hi],
            items[lo:hi],
        )
    return out


def forward(params: NeuMFParams, user_id: int, item_id: int) -> float:
    return float(predict(params, [user_id], [item_id])[0])


def _as_batch(batch) -> TrainBatch:
    if isinstance(batch, TrainBatch):
        return batch
    if isinstance(batch, TrainInstance):
        return TrainBatch.from_instances([batch])
    return TrainBatch.from_instances(batch)


def loss(params: NeuMFParams, batch) -> float:
    """Weighted sum of squared residuals over the batch."""
    b = _as_batch(batch)
    if len(b) == 0:
        raise ValueError("loss of an empty batch")
    yhat = predict(params, b.users, b.items)
    return float(np.sum(b.weights * (b.labels - yhat) ** 2))


def mean_loss(params: NeuMFParams, batch) -> float:
    """Per-instance weighted squared error (weights normalised by count)."""
    b = _as_batch(batch)
    return loss(params, b) / len(b)


def gradients(params: NeuMFParams, batch) -> GradientSet:
    b = _as_batch(batch)
    if len(b) == 0:
        raise ValueError("gradients of an empty batch")
    _check_ids(params, b.users, b.items)
    _, ur, ir, g_pG, g_qG, g_pM, g_qM, g_ws, g_bs, g_h = _fallback.backward(
        params.user_emb_gmf,
        params.item_emb_gmf,
        params.user_emb_mlp,
        params.item_emb_mlp,
        params.mlp_weights,
        params.mlp_biases,
        params.output_weights,
        b.users,
        b.items,
        b.labels,
        b.weights,
        1.0,
    )
    return GradientSet(ur, ir, g_pG, g_qG, g_pM, g_qM, g_ws, g_bs, g_h)


_ROW_GRADS = {
    "user_emb_gmf": ("user_rows", "user_emb_gmf"),
    "item_emb_gmf": ("item_rows", "item_emb_gmf"),
    "user_emb_mlp": ("user_rows", "user_emb_mlp"),
    "item_emb_mlp": ("item_rows", "item_emb_mlp"),
}


def optimizer_step(
    params: NeuMFParams, grads: GradientSet, hyper: Hyperparams, opt_state: OptState | None = None
) -> tuple[NeuMFParams, OptState]:
    """Apply one update, returning new parameters and optimizer state.

    Embedding matrices are updated only on ``grads``' rows.
    """
    new = params.copy()
    if opt_state is None:
        opt_state = OptState.zeros_like(params)
    state = OptState(opt_state.t + 1, {k: (m.copy(), v.copy()) for k, (m, v) in opt_state.moments.items()})
    lr = hyper.learning_rate
    b1, b2, eps = hyper.beta1, hyper.beta2, hyper.eps
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    grad_ws = dict(
        [(f"mlp_weights.{k}", g) for k, g in enumerate(grads.mlp_weights)]
        + [(f"mlp_biases.{k}", g) for k, g in enumerate(grads.mlp_biases)]
        + [("output_weights", grads.output_weights)]
    )
    for name, theta in new.named_arrays():
        if name in _ROW_GRADS:
            rows_attr, g_attr = _ROW_GRADS[name]
            rows = getattr(grads, rows_attr)
            g = getattr(grads, g_attr)
            if g.shape != (rows.size, theta.shape[1]) or (rows.size and rows.max() >= theta.shape[0]):
                raise ValueError(f"gradient for {name} does not fit parameter shape {theta.shape}")
            if hyper.optimizer == "sgd":
                theta[rows] -= lr * g
            else:
                m, v = state.moments[name]
                _fallback.adam_rows(theta, m, v, rows, g, lr, b1, b2, eps, bc1, bc2)
        else:
            g = grad_ws.get(name)
            if g is None or g.shape != theta.shape:
                raise ValueError(f"gradient for {name} does not match parameter shape {theta.shape}")
            if hyper.optimizer == "sgd":
                theta -= lr * g
            else:
                m, v = state.moments[name]
                _fallback.adam_update(theta, m, v, g, lr, b1, b2, eps, bc1, bc2)
    return new, state


# -- local training ---------------------------------------------------------------


class _Workspace:
    """Parameters re-laid-out for the step kernel: MLP tensors become views of one flat buffer."""

    def __init__(self, params: NeuMFParams) -> None:
        self.params = params.copy()
        p = self.params
        d = p.factors
        self.widths = np.array(p.widths, dtype=np.int64)
        self.flat = np.empty(_fallback.flat_size(self.widths, d))
        ws, bs, h = _fallback.mlp_views(self.flat, self.widths, d)
        for dst, src in zip(ws + bs + [h], p.mlp_weights + p.mlp_biases + [p.output_weights]):
            dst[...] = src
        p.mlp_weights, p.mlp_biases, p.output_weights = ws, bs, h
        self.moments = [np.zeros_like(a) for a in (p.user_emb_gmf, p.user_emb_gmf, p.item_emb_gmf, p.item_emb_gmf,
                                                   p.user_emb_mlp, p.user_emb_mlp, p.item_emb_mlp, p.item_emb_mlp)]
        self.m_flat = np.zeros_like(self.flat)
        self.v_flat = np.zeros_like(self.flat)
        self.t = 0

    def step(self, impl, batch: TrainBatch, hyper: Hyperparams) -> float:
        p = self.params
        self.t += 1
        mode = kernels.SGD if hyper.optimizer == "sgd" else kernels.ADAM
        return impl.neumf_step(
            p.user_emb_gmf, p.item_emb_gmf, p.user_emb_mlp, p.item_emb_mlp,
            self.flat, self.widths, batch.users, batch.items, batch.labels, batch.weights,
            mode, hyper.learning_rate, self.t, hyper.beta1, hyper.beta2, hyper.eps,
            *self.moments, self.m_flat, self.v_flat,
        )

    def result(self) -> NeuMFParams:
        p = self.params
        return NeuMFParams(
            p.user_emb_gmf, p.item_emb_gmf, p.user_emb_mlp, p.item_emb_mlp,
            [w.copy() for w in p.mlp_weights], [b.copy() for b in p.mlp_biases], p.output_weights.copy(),
        )


def train_local(
    params: NeuMFParams,
    train_instances,
    hyper: Hyperparams,
    seed,
    history: list[float] | None = None,
    backend: str | None = None,
) -> NeuMFParams:
    """Shuffled mini-batch training for ``hyper.local_epochs`` epochs.

    Each step minimises the batch's per-instance mean loss. Per-epoch mean
    losses (measured during the epoch) are appended to ``history`` if given.
    """
    data = _as_batch(train_instances)
    if len(data) == 0:
        raise ValueError("no training instances")
    _check_ids(params, data.users, data.items)
    if hyper.local_epochs == 0:
        return params.copy()
    impl = kernels.get(backend) if backend else kernels
    work = _Workspace(params)
    rng = np.random.default_rng(seed)
    n = len(data)
    bs = hyper.batch_size
    for _ in range(hyper.local_epochs):
        order = rng.permutation(n)
        users, items = data.users[order], data.items[order]
        labels, weights = data.labels[order], data.weights[order]
        total = 0.0
        for lo in range(0, n, bs):
            total += work.step(
                impl,
                TrainBatch(users[lo : lo + bs], items[lo : lo + bs], labels[lo : lo + bs], weights[lo : lo + bs]),
                hyper,
            )
        if history is not None:
            history.append(total / n)
    return work.result()


def n_batches(n_instances: int, batch_size: int) -> int:
    return -(-n_instances // batch_size)
