"""Experiment configuration read from an INI file.

Every key is optional; defaults reproduce the reference parameter
settings (lr 0.0005, batch 64, 32 factors, 5 local epochs, 10 rounds,
lambda 3000, 4 negatives per positive, 20 clients). Example::

    [data]
    source = movielens
    path = data/ml-100k/ratings.dat
    n_clients = 20

    [run]
    seed = 7
    mechanism = d3qn
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from fedrec.auction import MECHANISMS, D3QNConfig
from fedrec.data import SkewConfig
from fedrec.economics import DEFAULT_KAPPA, DEFAULT_LAMBDA, SurplusModel
from fedrec.neumf import Hyperparams

SOURCES = ("movielens", "synthetic")


class ConfigError(ValueError):
    """Raised for unreadable or inconsistent configuration."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "movielens"
    path: str = "data/ml-100k/ratings.dat"
    n_clients: int = 20
    size_sigma: float = 0.5
    rating_bias: float = 0.3
    # synthetic source only
    n_users: int = 200
    n_items: int = 300
    per_user: int = 30
    noisy_fraction: float = 0.4
    noise_low: float = 0.0
    noise_high: float = 0.8
    eval_negatives: int = 50


@dataclass(frozen=True)
class BidConfig:
    base_cost: float = 1.0
    rho: float = 0.5
    noise: float = 0.3


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    rounds: int = 10
    eval_each_round: bool = True
    model: SurplusModel = field(default_factory=SurplusModel)
    bids: BidConfig = field(default_factory=BidConfig)
    d3qn: D3QNConfig = field(default_factory=D3QNConfig)
    mechanism: str = "d3qn"
    seed: int = 0
    out: str = "out"

    def __post_init__(self) -> None:
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}")
        if self.rounds < 1 or self.data.n_clients < 1:
            raise ConfigError("rounds and n_clients must be positive")

    @property
    def skew(self) -> SkewConfig:
        return SkewConfig(self.data.size_sigma, self.data.rating_bias)

    def with_overrides(self, **kw) -> ExperimentConfig:
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def echo(self) -> dict:
        """Plain-data view for reports."""
        return {
            "data": asdict(self.data),
            "hyper": asdict(self.hyper),
            "rounds": self.rounds,
            "model": {"kappa": list(self.model.kappa), "lambda": self.model.lam},
            "bids": asdict(self.bids),
            "d3qn": asdict(self.d3qn),
            "mechanism": self.mechanism,
            "seed": self.seed,
        }


def _coerce(cls, section: configparser.SectionProxy | None, ctx: str, skip=()) -> dict:
    if section is None:
        return {}
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"[{ctx}] unknown key {key!r}")
        default = getattr(cls(), key)
        try:
            if isinstance(default, bool):
                out[key] = section.getboolean(key)
            elif isinstance(default, tuple):
                out[key] = tuple(int(v) for v in raw.replace(",", " ").split())
            elif isinstance(default, int):
                out[key] = int(raw)
            elif isinstance(default, float) or default is None:
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{ctx}] bad value for {key!r}: {raw!r}") from exc
    return out


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse ``path``; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for name in parser.sections():
        if name not in ("data", "model", "federation", "economics", "bids", "auction", "run"):
            raise ConfigError(f"unknown section [{name}]")
    get = lambda name: parser[name] if parser.has_section(name) else None  # noqa: E731
    for name, allowed in (("federation", {"rounds", "eval_each_round"}), ("run", {"seed", "mechanism", "out"})):
        extra = set(get(name) or ()) - allowed
        if extra:
            raise ConfigError(f"[{name}] unknown key {sorted(extra)[0]!r}")

    try:
        data = DataConfig(**_coerce(DataConfig, get("data"), "data"))
        hyper = Hyperparams(**_coerce(Hyperparams, get("model"), "model"))
        bids = BidConfig(**_coerce(BidConfig, get("bids"), "bids"))
        d3qn = D3QNConfig(**_coerce(D3QNConfig, get("auction"), "auction"))

        kappa = list(DEFAULT_KAPPA)
        lam = DEFAULT_LAMBDA
        econ = get("economics")
        if econ is not None:
            for key in econ:
                if key not in {f"kappa{i}" for i in range(1, 7)} | {"lambda"}:
                    raise ConfigError(f"[economics] unknown key {key!r}")
            kappa = [econ.getfloat(f"kappa{i + 1}", kappa[i]) for i in range(6)]
            lam = econ.getfloat("lambda", lam)
        model = SurplusModel(tuple(kappa), lam)

        fed = get("federation")
        rounds = fed.getint("rounds", 10) if fed is not None else 10
        each = fed.getboolean("eval_each_round", True) if fed is not None else True
        run = get("run")
        mechanism = run.get("mechanism", "d3qn").strip() if run is not None else "d3qn"
        seed = run.getint("seed", 0) if run is not None else 0
        out = run.get("out", "out").strip() if run is not None else "out"
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    if data.source == "movielens":
        data_path = Path(data.path)
        if not data_path.is_absolute() and not data_path.exists():
            data_path = Path(path).parent / data_path
        data = replace(data, path=str(data_path))
    return ExperimentConfig(data, hyper, rounds, each, model, bids, d3qn, mechanism, seed, out)
