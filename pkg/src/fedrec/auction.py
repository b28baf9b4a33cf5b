"""Reverse auction for client selection.

The D3QN agent treats selection as an MDP: the state is the 0/1 vector of
clients already in the candidate set, an action adds one more client, and
the reward is the resulting change in social surplus. A greedy rollout of
the trained evaluate network orders the clients; the winning set is the
prefix of that order with the highest surplus. Winners are paid their bids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedrec import economics
from fedrec.economics import ClientProfile, SurplusModel


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class D3QNConfig:
    episodes: int = 600
    eps_start: float = 0.1
    eps_end: float = 0.99
    eps_decay_episodes: int = 400
    gamma: float = 0.9
    replay_capacity: int = 10_000
    batch_size: int = 64
    target_sync: int = 50
    trunk: tuple[int, ...] = (128, 64)
    learning_rate: float = 1e-3
    reward_scale: float | None = None  # default 1 / lambda

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.episodes, self.replay_capacity, self.batch_size, self.target_sync) < 1:
            raise ValueError("episode, replay, batch and sync counts must be positive")
        if self.learning_rate <= 0 or any(w < 1 for w in self.trunk):
            raise ValueError("learning rate and trunk widths must be positive")

    def epsilon(self, episode: int) -> float:
        """Probability of the greedy branch, annealed from ``eps_start`` to ``eps_end``."""
        frac = min(1.0, episode / max(1, self.eps_decay_episodes))
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass
class AuctionOutcome:
    mechanism: str
    selection: np.ndarray
    surplus: float
    payments: dict[int, float]
    trace: list[tuple[int, float]] = field(default_factory=list)

    @property
    def winners(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.selection)]

    @property
    def total_payment(self) -> float:
        return float(sum(self.payments.values()))

    @property
    def per_unit_cost_surplus(self) -> float | None:
        return economics.surplus_per_unit_cost(self.surplus, self.total_payment)

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "selection": [int(c) for c in self.selection],
            "surplus": self.surplus,
            "per_unit_cost_surplus": self.per_unit_cost_surplus,
            "payments": {str(k): v for k, v in sorted(self.payments.items())},
            "trace": [[a, r] for a, r in self.trace],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _settle(mechanism: str, selection: np.ndarray, profiles, model, trace=()) -> AuctionOutcome:
    selection = np.asarray(selection, dtype=np.int64)
    payments = {p.client_id: p.bid for bit, p in zip(selection, profiles) if bit}
    s = economics.surplus(selection, profiles, model)
    return AuctionOutcome(mechanism, selection, s, payments, list(trace))


# -- environment -----------------------------------------------------------------


def env_reset(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one client")
    return np.zeros(n, dtype=np.int8)


class SurplusCache:
    """Memoised surplus of selection vectors for one auction."""

    def __init__(self, profiles: Sequence[ClientProfile], model: SurplusModel) -> None:
        self.profiles = list(profiles)
        self.model = model
        self._memo: dict[bytes, float] = {}

    def __call__(self, state: np.ndarray) -> float:
        key = np.asarray(state, dtype=np.int8).tobytes()
        hit = self._memo.get(key)
        if hit is None:
            hit = economics.surplus(state, self.profiles, self.model)
            self._memo[key] = hit
        return hit


def env_step(state: np.ndarray, action: int, profiles, model: SurplusModel, surplus_fn=None) -> Transition:
    state = np.asarray(state, dtype=np.int8)
    if not 0 <= action < state.size:
        raise IndexError(f"action {action} out of range")
    if state[action]:
        raise ValueError(f"client {action} is already selected")
    surplus_fn = surplus_fn or (lambda s: economics.surplus(s, profiles, model))
    nxt = state.copy()
    nxt[action] = 1
    reward = surplus_fn(nxt) - surplus_fn(state)
    return Transition(state, int(action), float(reward), nxt, bool(nxt.all()))


# -- networks ----------------------------------------------------------------------


class QNetwork:
    """Dueling MLP: ReLU trunk, then ``Q = V + A - mean(A)``.

    All weights are views into one flat buffer so the optimizer can update
    them as a single vector.
    """

    def __init__(self, n: int, trunk: Sequence[int], rng: np.random.Generator | None = None) -> None:
        self.n = n
        self.trunk = tuple(int(w) for w in trunk)
        widths = [n, *self.trunk]
        last = widths[-1]
        self._shapes = [(a, b) for a, b in zip(widths[:-1], widths[1:])]
        self._shapes += [(b,) for b in widths[1:]]
        self._shapes += [(last, 1), (1,), (last, n), (n,)]
        self.flat = np.zeros(sum(int(np.prod(s)) for s in self._shapes))
        self._bind()
        if rng is not None:
            for w in self.ws:
                bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
                w[...] = rng.uniform(-bound, bound, w.shape)
            bound = math.sqrt(6.0 / (last + 1))
            self.wv[...] = rng.uniform(-bound, bound, self.wv.shape)
            bound = math.sqrt(6.0 / (last + n))
            self.wa[...] = rng.uniform(-bound, bound, self.wa.shape)

    def _views(self, buf: np.ndarray) -> list[np.ndarray]:
        out, pos = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(buf[pos : pos + size].reshape(shape))
            pos += size
        return out

    def _bind(self) -> None:
        views = self._views(self.flat)
        k = len(self.trunk)
        self.ws = views[:k]
        self.bs = views[k : 2 * k]
        self.wv, self.bv, self.wa, self.ba = views[2 * k :]

    def copy_from(self, other: QNetwork) -> None:
        self.flat[...] = other.flat

    def clone(self) -> QNetwork:
        twin = QNetwork(self.n, self.trunk)
        twin.copy_from(self)
        return twin

    def streams(self, states: np.ndarray):
        """``(value, advantage, cache)`` for a batch of states."""
        z = np.atleast_2d(np.asarray(states, dtype=np.float64))
        zs, acts = [z], []
        for w, b in zip(self.ws, self.bs):
            a = z @ w + b
            acts.append(a)
            z = np.maximum(a, 0.0)
            zs.append(z)
        value = z @ self.wv + self.bv
        adv = z @ self.wa + self.ba
        return value, adv, (zs, acts)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        value, adv, _ = self.streams(states)
        return value + adv - adv.mean(axis=1, keepdims=True)

    def grad(self, states: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean squared TD error on the taken actions and its flat parameter gradient."""
        value, adv, (zs, acts) = self.streams(states)
        q = value + adv - adv.mean(axis=1, keepdims=True)
        rows = np.arange(len(actions))
        err = q[rows, actions] - targets
        loss = float(np.mean(err**2))
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * err / len(actions)
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
        g = np.empty_like(self.flat)
        views = self._views(g)
        k = len(self.trunk)
        z = zs[-1]
        np.matmul(z.T, dv, out=views[2 * k])
        views[2 * k + 1][...] = dv.sum(axis=0)
        np.matmul(z.T, da, out=views[2 * k + 2])
        views[2 * k + 3][...] = da.sum(axis=0)
        dz = dv @ self.wv.T + da @ self.wa.T
        for j in range(k - 1, -1, -1):
            d_act = dz * (acts[j] > 0)
            np.matmul(zs[j].T, d_act, out=views[j])
            views[k + j][...] = d_act.sum(axis=0)
            if j:
                dz = d_act @ self.ws[j].T
        return loss, g


class Adam:
    """Adam on a single flat parameter vector (updated in place)."""

    def __init__(self, theta: np.ndarray, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> None:
        self.theta = theta
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros_like(theta)
        self.v = np.zeros_like(theta)
        self.t = 0

    def step(self, g: np.ndarray) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        self.m *= self.b1
        self.m += (1.0 - self.b1) * g
        self.v *= self.b2
        self.v += (1.0 - self.b2) * g * g
        self.theta -= self.lr * (self.m / bc1) / (np.sqrt(self.v / bc2) + self.eps)


class ReplayBuffer:
    """Uniform ring buffer of transitions."""

    def __init__(self, capacity: int, n: int) -> None:
        self.capacity = capacity
        self.states = np.zeros((capacity, n), dtype=np.int8)
        self.next_states = np.zeros((capacity, n), dtype=np.int8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition, reward: float | None = None) -> None:
        k = self._pos
        self.states[k] = tr.state
        self.next_states[k] = tr.next_state
        self.actions[k] = tr.action
        self.rewards[k] = tr.reward if reward is None else reward
        self.terminal[k] = tr.terminal
        self._pos = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(self.size, size=batch)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.terminal[idx]


# -- policy and targets ---------------------------------------------------------------


def masked_argmax(q: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Row-wise argmax over unselected clients (ties to the lowest index)."""
    q = np.atleast_2d(q)
    masked = np.where(np.atleast_2d(states) == 0, q, -np.inf)
    return masked.argmax(axis=1)


def policy_action(net: QNetwork, state: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy masked argmax with probability ``epsilon``, else a uniform unselected client."""
    legal = np.flatnonzero(np.asarray(state) == 0)
    if legal.size == 0:
        raise ValueError("no unselected client left")
    if rng.random() < epsilon:
        return int(masked_argmax(net(state[None, :]), state[None, :])[0])
    return int(rng.choice(legal))


def td_target(
    rewards: np.ndarray,
    next_states: np.ndarray,
    terminal: np.ndarray,
    evaluate_net: QNetwork,
    target_net: QNetwork,
    gamma: float,
) -> np.ndarray:
    """Double-Q targets: evaluate net picks the next action, target net values it."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminal = np.asarray(terminal, dtype=bool)
    y = rewards.copy()
    live = ~terminal
    if live.any():
        nxt = np.atleast_2d(next_states)[live]
        best = masked_argmax(evaluate_net(nxt), nxt)
        y[live] += gamma * target_net(nxt)[np.arange(best.size), best]
    return y


def td_target_transitions(batch: Sequence[Transition], evaluate_net, target_net, gamma: float) -> np.ndarray:
    if not batch:
        raise ValueError("empty transition batch")
    return td_target(
        np.array([t.reward for t in batch]),
        np.array([t.next_state for t in batch]),
        np.array([t.terminal for t in batch]),
        evaluate_net,
        target_net,
        gamma,
    )


# -- training -------------------------------------------------------------------------


@dataclass
class TrainedAgent:
    net: QNetwork
    reward_scale: float
    buffer_size: int
    updates: int
    episode_returns: list[float]

    def q_values(self, state: np.ndarray) -> np.ndarray:
        """Action values in surplus units."""
        return self.net(np.asarray(state)[None, :])[0] / self.reward_scale


def train_agent(
    profiles: Sequence[ClientProfile], model: SurplusModel, config: D3QNConfig | None = None, seed: int = 0
) -> TrainedAgent:
    config = config or D3QNConfig()
    n = len(profiles)
    if n < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(seed)
    scale = config.reward_scale if config.reward_scale is not None else 1.0 / model.lam
    evaluate_net = QNetwork(n, config.trunk, rng)
    target_net = evaluate_net.clone()
    opt = Adam(evaluate_net.flat, config.learning_rate)
    buffer = ReplayBuffer(config.replay_capacity, n)
    surplus_fn = SurplusCache(profiles, model)
    updates = 0
    returns = []
    for episode in range(config.episodes):
        eps = config.epsilon(episode)
        state = env_reset(n)
        total = 0.0
        while True:
            action = policy_action(evaluate_net, state, eps, rng)
            tr = env_step(state, action, profiles, model, surplus_fn)
            buffer.push(tr, tr.reward * scale)
            total += tr.reward
            if len(buffer) >= min(config.batch_size, config.replay_capacity):
                s, a, r, s2, term = buffer.sample(config.batch_size, rng)
                y = td_target(r, s2, term, evaluate_net, target_net, config.gamma)
                _, grads = evaluate_net.grad(s, a, y)
                opt.step(grads)
                updates += 1
                if updates % config.target_sync == 0:
                    target_net.copy_from(evaluate_net)
            state = tr.next_state
            if tr.terminal:
                break
        returns.append(total)
    return TrainedAgent(evaluate_net, scale, len(buffer), updates, returns)


def greedy_rollout(agent: TrainedAgent | QNetwork, profiles, model: SurplusModel) -> AuctionOutcome:
    """Purely greedy rollout; winners are the best-surplus prefix (ties: shorter)."""
    net = agent.net if isinstance(agent, TrainedAgent) else agent
    n = len(profiles)
    surplus_fn = SurplusCache(profiles, model)
    state = env_reset(n)
    best_s = surplus_fn(state)
    best_len = 0
    order: list[int] = []
    trace: list[tuple[int, float]] = []
    rng = np.random.default_rng(0)
    while not state.all():
        action = policy_action(net, state, 1.0, rng)
        tr = env_step(state, action, profiles, model, surplus_fn)
        order.append(action)
        trace.append((action, tr.reward))
        state = tr.next_state
        s = surplus_fn(state)
        if s > best_s + 1e-9 * max(1.0, abs(best_s)):
            best_s, best_len = s, len(order)
    selection = np.zeros(n, dtype=np.int64)
    selection[order[:best_len]] = 1
    return _settle("d3qn", selection, profiles, model, trace)


def d3qn_auction(profiles, model: SurplusModel, config: D3QNConfig | None = None, seed: int = 0) -> AuctionOutcome:
    return greedy_rollout(train_agent(profiles, model, config, seed), profiles, model)


def simple_auction(profiles, model: SurplusModel, fraction: float = 0.8) -> AuctionOutcome:
    """Cheapest ``ceil(fraction * n)`` bidders (ties by client id)."""
    n = len(profiles)
    if n < 1:
        raise ValueError("need at least one client")
    k = math.ceil(round(fraction * n, 9))
    order = sorted(range(n), key=lambda i: (profiles[i].bid, profiles[i].client_id))
    selection = np.zeros(n, dtype=np.int64)
    selection[order[:k]] = 1
    return _settle("simple", selection, profiles, model)


def greedy_all(profiles, model: SurplusModel) -> AuctionOutcome:
    n = len(profiles)
    if n < 1:
        raise ValueError("need at least one client")
    return _settle("greedy-all", np.ones(n, dtype=np.int64), profiles, model)


def oracle_auction(profiles, model: SurplusModel) -> AuctionOutcome:
    selection, _ = economics.brute_force_optimal(profiles, model)
    return _settle("oracle", selection, profiles, model)


MECHANISMS = ("d3qn", "simple", "greedy-all")


def run_mechanism(
    mechanism: str, profiles, model: SurplusModel, config: D3QNConfig | None = None, seed: int = 0
) -> AuctionOutcome:
    if mechanism == "d3qn":
        return d3qn_auction(profiles, model, config, seed)
    if mechanism == "simple":
        return simple_auction(profiles, model)
    if mechanism == "greedy-all":
        return greedy_all(profiles, model)
    if mechanism == "oracle":
        return oracle_auction(profiles, model)
    raise ValueError(f"unknown mechanism {mechanism!r}")
