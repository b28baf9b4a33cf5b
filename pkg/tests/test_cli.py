from __future__ import annotations

import json

import pytest

from fedrec import cli, economics
from fedrec.config import ConfigError, ExperimentConfig, load_config
from fedrec.ledger import BLOCK_SIZE, PayloadType, load_chain, verify_chain

from conftest import REPO

SMALL = REPO / "configs" / "synthetic_small.ini"


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def sim(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FEDREC_LOGICAL_CLOCK", "1")
    out = tmp_path / "run"
    code, _, _ = run(["simulate", "--config", SMALL, "--out", out], capsys)
    assert code == 0
    return out


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        h = cfg.hyper
        assert (h.learning_rate, h.batch_size, h.factors, h.local_epochs, h.neg_ratio) == (5e-4, 64, 32, 5, 4)
        assert cfg.rounds == 10 and cfg.model.lam == 3000 and cfg.data.n_clients == 20

    def test_sections(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text(
            "[model]\nmlp_layers = 8, 4\noptimizer = sgd\n[economics]\nlambda = 100\nkappa2 = 2\n"
            "[auction]\ntrunk = 16 8\ngamma = 0.5\n[federation]\nrounds = 3\n[run]\nseed = 9\nmechanism = simple\n"
        )
        cfg = load_config(p)
        assert cfg.hyper.mlp_layers == (8, 4) and cfg.hyper.optimizer == "sgd"
        assert cfg.model.lam == 100 and cfg.model.kappa[1] == 2
        assert cfg.d3qn.trunk == (16, 8) and cfg.d3qn.gamma == 0.5
        assert (cfg.rounds, cfg.seed, cfg.mechanism) == (3, 9, "simple")

    @pytest.mark.parametrize(
        "text",
        ["[nope]\n", "[model]\nfactor = 3\n", "[model]\nfactors = x\n", "[run]\nmechanism = vickrey\n",
         "[economics]\nkappa7 = 1\n", "[run]\nsed = 1\n", "[model]\noptimizer = rmsprop\n", "[auction]\ngamma = 0\n"],
    )
    def test_rejects(self, tmp_path, text):
        p = tmp_path / "c.ini"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_config(p)

    def test_relative_data_path(self):
        cfg = load_config(REPO / "configs" / "movielens_100k.ini")
        assert cfg.data.path.endswith("ratings.dat")

    def test_overrides(self):
        cfg = ExperimentConfig().with_overrides(seed=4, mechanism=None)
        assert cfg.seed == 4 and cfg.mechanism == "d3qn"


class TestSimulate:
    def test_artifacts_and_block_counts(self, sim):
        report = json.loads((sim / "report.json").read_text())
        k, t = len(report["auction"]["winners"]), report["config"]["rounds"]
        chain = load_chain(sim / "chain.bin")
        types = [b.payload_type for b in chain]
        assert types.count(PayloadType.AUCTION_RESULT) == 1
        assert types.count(PayloadType.LOCAL_UPDATE) == t * k
        assert types.count(PayloadType.GLOBAL_MODEL) == t
        assert types.count(PayloadType.PAYMENT) == k
        assert len(report["global_loss"]) == t
        assert (sim / "metrics.csv").read_text().count("\n") == t + 1
        assert report["chain_head"] == chain.head.hex()
        assert report["evaluation_scope"] == "all-clients"

    def test_deterministic(self, sim, tmp_path, capsys):
        again = tmp_path / "again"
        assert run(["simulate", "--config", SMALL, "--out", again], capsys)[0] == 0
        assert (sim / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()
        assert (sim / "chain.bin").read_bytes() == (again / "chain.bin").read_bytes()

    def test_greedy_all_trains_everyone(self, tmp_path, capsys, monkeypatch):
        out = tmp_path / "ga"
        assert run(["simulate", "--config", SMALL, "--mechanism", "greedy-all", "--out", out], capsys)[0] == 0
        report = json.loads((out / "report.json").read_text())
        assert report["auction"]["winners"] == list(range(6))
        rounds = report["config"]["rounds"]
        local = [b for b in load_chain(out / "chain.bin") if b.payload_type == PayloadType.LOCAL_UPDATE]
        assert len(local) == 6 * rounds

    def test_missing_data(self, tmp_path, capsys):
        p = tmp_path / "c.ini"
        p.write_text(f"[data]\npath = {tmp_path / 'absent.dat'}\n")
        code, _, err = run(["simulate", "--config", p, "--out", tmp_path / "o"], capsys)
        assert code == 2 and "absent.dat" in err

    def test_empty_selection_is_reported(self, tmp_path, capsys):
        p = tmp_path / "c.ini"
        p.write_text(SMALL.read_text().replace("[run]", "[bids]\nbase_cost = 100000\n\n[run]").replace("mechanism = simple", "mechanism = d3qn"))
        code, _, err = run(["simulate", "--config", p, "--out", tmp_path / "o"], capsys)
        assert code == 2 and "partial artifacts" in err
        assert len(load_chain(tmp_path / "o" / "chain.bin")) == 1


class TestVerify:
    def test_fresh_chain(self, sim, capsys):
        code, out, _ = run(["verify", sim / "chain.bin"], capsys)
        assert code == 0 and "payloads verified" in out

    def test_edited_payload(self, sim, capsys):
        chain = load_chain(sim / "chain.bin")
        target = sim / "payloads" / chain[3].payload_digest.hex()
        data = bytearray(target.read_bytes())
        data[-1] ^= 0xFF
        target.write_bytes(bytes(data))
        code, _, err = run(["verify", sim / "chain.bin"], capsys)
        assert code == 3 and "block 3" in err

    def test_flipped_chain_byte(self, sim, capsys):
        raw = bytearray((sim / "chain.bin").read_bytes())
        raw[4 + 2 * (BLOCK_SIZE + 4) + 20] ^= 1
        (sim / "chain.bin").write_bytes(bytes(raw))
        code, _, err = run(["verify", sim / "chain.bin"], capsys)
        assert code == 3 and "block 2" in err

    def test_empty_chain(self, tmp_path, capsys):
        (tmp_path / "c.bin").write_bytes(b"")
        assert run(["verify", tmp_path / "c.bin"], capsys)[0] == 0

    def test_unreadable(self, tmp_path, capsys):
        assert run(["verify", tmp_path / "missing.bin"], capsys)[0] == 2


class TestAuctionCommand:
    def _scenario(self, tmp_path, profiles):
        p = tmp_path / "s.ini"
        economics.dump_scenario(economics.Scenario(profiles), p)
        return p

    def test_simple_twenty(self, tmp_path, capsys):
        p = self._scenario(tmp_path, economics.generate_profiles(20, seed=0))
        code, out, _ = run(["auction", "--scenario", p, "--mechanism", "simple"], capsys)
        assert code == 0
        winners = json.loads(out.split("winners")[1].split("\n")[0].strip())
        assert len(winners) == 16 and "optimum" in out and "ratio" in out

    def test_zero_bids_full_selection(self, tmp_path, capsys):
        ps = [economics.ClientProfile(i, 20 + i, 0.2, 0.0) for i in range(5)]
        p = self._scenario(tmp_path, ps)
        cfg = tmp_path / "c.ini"
        cfg.write_text("[auction]\nepisodes = 150\neps_decay_episodes = 100\ntrunk = 32, 16\n")
        code, out, _ = run(["auction", "--scenario", p, "--config", cfg], capsys)
        assert code == 0 and "selection       11111" in out

    def test_bad_scenario(self, tmp_path, capsys):
        (tmp_path / "s.ini").write_text("[clients]\n0 = 1\n")
        assert run(["auction", "--scenario", tmp_path / "s.ini"], capsys)[0] == 2


class TestPlot:
    def _report(self, path, mech, losses, surplus):
        path.write_text(json.dumps({
            "global_loss": losses,
            "auction": {"mechanism": mech, "surplus": surplus, "per_unit_cost_surplus": surplus / 10,
                        "winners": [0], "total_payment": 10.0},
        }))
        return path

    def test_merge(self, tmp_path, capsys):
        reps = [self._report(tmp_path / f"{m}.json", m, [0.1 * k + j for j in range(10)], 100.0 * k)
                for k, m in enumerate(["d3qn", "simple", "greedy-all"], start=1)]
        assert run(["plot", *reps, "--out", tmp_path / "p"], capsys)[0] == 0
        loss = (tmp_path / "p" / "loss_vs_round.csv").read_text().splitlines()
        assert loss[0] == "round,d3qn,simple,greedy-all" and len(loss) == 11
        surplus = (tmp_path / "p" / "surplus.csv").read_text().splitlines()
        assert [row.split(",")[0] for row in surplus[1:]] == ["d3qn", "simple", "greedy-all"]

    def test_single_passthrough(self, tmp_path, capsys):
        rep = self._report(tmp_path / "a.json", "simple", [0.5, 0.4], 3.0)
        assert run(["plot", rep, "--out", tmp_path], capsys)[0] == 0
        assert (tmp_path / "loss_vs_round.csv").read_text() == "round,simple\n0,0.5\n1,0.4\n"

    def test_inconsistent_rounds(self, tmp_path, capsys):
        a = self._report(tmp_path / "a.json", "simple", [0.5, 0.4], 3.0)
        b = self._report(tmp_path / "b.json", "d3qn", [0.5], 3.0)
        assert run(["plot", a, b, "--out", tmp_path], capsys)[0] == 2


def test_usage_errors(capsys):
    assert run([], capsys)[0] == 1
    assert run(["simulate", "--mechanism", "vickrey"], capsys)[0] == 1
    assert run(["frobnicate"], capsys)[0] == 1


def test_bad_config_is_usage_error(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[model]\nfactors = -1\n")
    assert run(["simulate", "--config", tmp_path / "c.ini"], capsys)[0] == 1
