"""The three-phase experiment: auction, federated training, settlement."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedrec import auction, economics, federation
from fedrec.config import ExperimentConfig
from fedrec.data import (
    ClientData,
    Interaction,
    load_movielens,
    partition_by_user_blocks,
    partition_clients,
    rating_histogram,
    synthetic_interactions,
)
from fedrec.economics import ClientProfile
from fedrec.ledger import SERVER_ACTOR, Ledger, PayloadStore, PayloadType, default_clock

log = logging.getLogger(__name__)

AUCTION_ROUND = -1


class PipelineError(RuntimeError):
    """A run could not complete; artifacts written so far are listed in ``partial``."""

    def __init__(self, message: str, partial: list[str] | None = None) -> None:
        super().__init__(message)
        self.partial = partial or []


@dataclass
class ExperimentReport:
    losses: list[float]
    hr: float
    ndcg: float
    mse: float
    outcome: auction.AuctionOutcome
    chain_head: str
    config: dict
    round_metrics: list[federation.RoundMetrics] = field(default_factory=list)
    profiles: list[ClientProfile] = field(default_factory=list)
    eval_users: int = 0

    def to_dict(self) -> dict:
        return {
            "global_loss": self.losses,
            "hr@10": self.hr,
            "ndcg@10": self.ndcg,
            "mse": self.mse,
            "evaluated_users": self.eval_users,
            "evaluation_scope": "all-clients",
            "auction": {
                "mechanism": self.outcome.mechanism,
                "selection": [int(c) for c in self.outcome.selection],
                "winners": self.outcome.winners,
                "surplus": self.outcome.surplus,
                "per_unit_cost_surplus": self.outcome.per_unit_cost_surplus,
                "payments": {str(k): v for k, v in sorted(self.outcome.payments.items())},
                "total_payment": self.outcome.total_payment,
            },
            "profiles": [
                {"client_id": p.client_id, "size": p.dataset_size, "emd": p.emd, "bid": p.bid} for p in self.profiles
            ],
            "chain_head": self.chain_head,
            "config": self.config,
        }


def client_noise_levels(cfg: ExperimentConfig) -> np.ndarray:
    """Per-client rating noise for the synthetic source: a seeded subset is noisy."""
    d = cfg.data
    rng = np.random.default_rng([cfg.seed, 6])
    noisy = np.zeros(d.n_clients, dtype=bool)
    noisy[rng.permutation(d.n_clients)[: round(d.noisy_fraction * d.n_clients)]] = True
    return np.where(noisy, d.noise_high, d.noise_low)


def load_data(cfg: ExperimentConfig) -> tuple[list[Interaction], int, int, list]:
    """Interactions, catalogue sizes and client partitions for ``cfg``."""
    d = cfg.data
    if d.source == "movielens":
        rows, ids = load_movielens(d.path)
        parts = partition_clients(rows, d.n_clients, cfg.skew, cfg.seed)
        return rows, ids.n_users, ids.n_items, parts
    if d.n_users < d.n_clients:
        raise ValueError(f"{d.n_clients} clients but only {d.n_users} synthetic users")
    per_client = np.array_split(np.arange(d.n_users), d.n_clients)
    levels = client_noise_levels(cfg)
    user_noise = np.concatenate([np.full(len(u), lv) for u, lv in zip(per_client, levels)])
    rows = synthetic_interactions(d.n_users, d.n_items, d.per_user, cfg.seed, noise=user_noise)
    return rows, d.n_users, d.n_items, partition_by_user_blocks(rows, d.n_clients)


def build_profiles(datas: list[ClientData], cfg: ExperimentConfig) -> list[ClientProfile]:
    """Declared size, EMD against the pooled training histogram, and a synthesized bid."""
    pooled = rating_histogram(x for cd in datas for x in cd.train)
    sizes = np.array([cd.size for cd in datas])
    b = cfg.bids
    bids = economics.synthesize_bids(sizes, b.base_cost, b.rho, b.noise, np.random.default_rng([cfg.seed, 5]))
    return [
        ClientProfile(cd.client_id, int(cd.size), economics.emd(rating_histogram(cd.train), pooled), float(bid))
        for cd, bid in zip(datas, bids)
    ]


def _metrics_csv(rows: list[federation.RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "global_loss", "hr@10", "ndcg@10", "mse"])
    for r in rows:
        w.writerow([r.round, repr(r.global_loss)] + ["" if v is None else repr(v) for v in (r.hr, r.ndcg, r.mse)])
    return buf.getvalue()


def _payment_bytes(client_id: int, amount: float) -> bytes:
    return json.dumps({"client_id": client_id, "amount": amount}, sort_keys=True).encode("utf-8")


def simulate(cfg: ExperimentConfig, out_dir: str | Path | None = None, backend: str | None = None) -> ExperimentReport:
    """Run the full pipeline and write ``report.json``, ``metrics.csv``,
    ``auction.csv``, ``chain.bin`` and ``payloads/`` into ``out_dir``.
    """
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    ledger = Ledger(PayloadStore(out / "payloads"), default_clock())

    def save_chain() -> None:
        ledger.chain.save(out / "chain.bin")
        if "chain.bin" not in written:
            written.extend(["chain.bin", "payloads/"])

    _, n_users, n_items, parts = load_data(cfg)
    datas = [ClientData.prepare(p) for p in parts]
    profiles = build_profiles(datas, cfg)

    outcome = auction.run_mechanism(cfg.mechanism, profiles, cfg.model, cfg.d3qn, cfg.seed)
    ledger.record(PayloadType.AUCTION_RESULT, SERVER_ACTOR, AUCTION_ROUND, outcome.to_bytes())
    log.info("%s auction: %d winners, surplus %.3f", outcome.mechanism, len(outcome.winners), outcome.surplus)
    if not outcome.winners:
        save_chain()
        raise PipelineError("the auction selected no clients; nothing to train", written)

    clients, shared0 = federation.build_clients(
        datas, n_users, n_items, cfg.hyper, cfg.seed, eval_negatives=cfg.data.eval_negatives
    )
    try:
        result = federation.run_federation(
            clients, shared0, cfg.rounds, cfg.hyper, ledger, cfg.seed,
            participants=outcome.winners, evaluate_each_round=cfg.eval_each_round, backend=backend,
        )
    except Exception as exc:
        save_chain()
        raise PipelineError(f"federated training failed: {exc}", written) from exc

    for cid, amount in sorted(outcome.payments.items()):
        ledger.record(PayloadType.PAYMENT, cid, cfg.rounds, _payment_bytes(cid, amount))
    save_chain()

    final = federation.evaluate(result.clients, result.shared)
    report = ExperimentReport(
        [m.global_loss for m in result.metrics],
        final.hr,
        final.ndcg,
        final.mse,
        outcome,
        ledger.chain.head.hex(),
        cfg.echo(),
        result.metrics,
        profiles,
        final.n_users,
    )
    (out / "metrics.csv").write_text(_metrics_csv(result.metrics), encoding="utf-8")
    (out / "auction.csv").write_text(auction_csv(outcome, profiles), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def auction_csv(outcome: auction.AuctionOutcome, profiles: list[ClientProfile]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "size", "emd", "bid", "selected", "payment"])
    for p, bit in zip(profiles, outcome.selection):
        w.writerow([p.client_id, p.dataset_size, repr(p.emd), repr(p.bid), int(bit), repr(outcome.payments.get(p.client_id, 0.0))])
    return buf.getvalue()
