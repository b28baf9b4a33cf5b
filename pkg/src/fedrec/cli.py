"""Command-line entry point: ``fedrec {simulate,auction,verify,plot}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 chain violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from fedrec import auction, economics
from fedrec.config import ConfigError, load_config
from fedrec.data import DataError
from fedrec.ledger import PayloadStore, decode_chain, verify_chain

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHAIN = 0, 1, 2, 3
ORACLE_PRINT_LIMIT = 20


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is our data-error code
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedrec", description="Auction-selected federated recommendation with an evidence chain.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="auction, federated training and settlement")
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--mechanism", choices=auction.MECHANISMS)
    s.add_argument("--out", type=Path)

    a = sub.add_parser("auction", help="run one auction mechanism on a scenario file")
    a.add_argument("--scenario", type=Path, required=True)
    a.add_argument("--mechanism", choices=auction.MECHANISMS, default="d3qn")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--config", type=Path, help="optional config supplying [auction] settings")

    v = sub.add_parser("verify", help="check a chain file (and its payloads/ directory, if present)")
    v.add_argument("chain", type=Path)
    v.add_argument("--payloads", type=Path, help="payload directory (default: payloads/ next to the chain)")

    g = sub.add_parser("plot", help="merge reports into plot-ready CSV tables")
    g.add_argument("reports", type=Path, nargs="+")
    g.add_argument("--out", type=Path, default=Path("."))
    return p


def cmd_simulate(args) -> int:
    from fedrec.pipeline import PipelineError, simulate

    cfg = load_config(args.config).with_overrides(seed=args.seed, mechanism=args.mechanism)
    out = args.out if args.out is not None else Path(cfg.out)
    try:
        report = simulate(cfg, out)
    except PipelineError as exc:
        note = ", ".join(exc.partial) if exc.partial else "none"
        print(f"error: {exc} (partial artifacts in {out}: {note})", file=sys.stderr)
        return EXIT_DATA
    o = report.outcome
    print(f"mechanism       {o.mechanism}")
    print(f"winners         {len(o.winners)} {o.winners}")
    print(f"surplus         {o.surplus:.4f}")
    print(f"per-unit cost   {_fmt(o.per_unit_cost_surplus)}")
    print(f"final loss      {report.losses[-1]:.6f}")
    print(f"HR@10           {report.hr:.4f}")
    print(f"NDCG@10         {report.ndcg:.4f}")
    print(f"MSE             {report.mse:.6f}")
    print(f"chain head      {report.chain_head}")
    print(f"artifacts       {out}")
    return EXIT_OK


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.4f}"


def cmd_auction(args) -> int:
    scenario = economics.load_scenario(args.scenario)
    d3qn = load_config(args.config).d3qn if args.config else None
    outcome = auction.run_mechanism(args.mechanism, scenario.profiles, scenario.model, d3qn, args.seed)
    print(f"mechanism       {outcome.mechanism}")
    print(f"selection       {''.join(str(int(c)) for c in outcome.selection)}")
    print(f"winners         {outcome.winners}")
    print(f"surplus         {outcome.surplus:.4f}")
    print(f"per-unit cost   {_fmt(outcome.per_unit_cost_surplus)}")
    print("payments        " + ", ".join(f"{k}:{v:.4f}" for k, v in sorted(outcome.payments.items())))
    for step, (action, reward) in enumerate(outcome.trace):
        print(f"  step {step:3d}  client {action:3d}  reward {reward:+.4f}")
    if len(scenario.profiles) <= ORACLE_PRINT_LIMIT:
        sel, best = economics.brute_force_optimal(scenario.profiles, scenario.model)
        print(f"optimum         {best:.4f} ({''.join(str(int(c)) for c in sel)})")
        print(f"ratio           {outcome.surplus / best:.4f}" if best != 0 else "ratio           undefined")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        raw = args.chain.read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.chain}: {exc}", file=sys.stderr)
        return EXIT_DATA
    payload_dir = args.payloads if args.payloads is not None else args.chain.parent / "payloads"
    store = PayloadStore(payload_dir) if payload_dir.is_dir() else None
    blocks, framing = decode_chain(raw)
    problem = verify_chain(blocks, store) or framing
    if problem is not None:
        print(f"violation: {problem}", file=sys.stderr)
        return EXIT_CHAIN
    checked = " and payloads" if store is not None else ""
    print(f"ok: {len(blocks)} blocks{checked} verified")
    return EXIT_OK


def _load_report(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc


def cmd_plot(args) -> int:
    reports = [_load_report(p) for p in args.reports]
    lengths = {len(r["global_loss"]) for r in reports}
    if len(lengths) != 1:
        raise DataError(f"reports disagree on the number of rounds: {sorted(lengths)}")
    labels = [r["auction"]["mechanism"] for r in reports]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{k}" for k, lab in enumerate(labels)]
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "loss_vs_round.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", *labels])
        for t in range(lengths.pop()):
            w.writerow([t, *(repr(r["global_loss"][t]) for r in reports)])
    with open(args.out / "surplus.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mechanism", "surplus", "per_unit_cost_surplus", "winners", "total_payment"])
        for lab, r in zip(labels, reports):
            a = r["auction"]
            puc = a["per_unit_cost_surplus"]
            w.writerow([lab, repr(a["surplus"]), "" if puc is None else repr(puc), len(a["winners"]), repr(a["total_payment"])])
    print(f"wrote {args.out / 'loss_vs_round.csv'} and {args.out / 'surplus.csv'}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "auction": cmd_auction, "verify": cmd_verify, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fedrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, economics.ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
