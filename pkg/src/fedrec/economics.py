"""Data-quality and social-surplus arithmetic for the reverse auction.

Quality of the final global model is predicted from the total dataset
size ``D`` of the selected clients and their mean distribution distance
``Delta``; revenue is ``lam * Q`` and the social surplus subtracts the
winning bids.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedrec import kernels
from fedrec.data import RatingHistogram

# Fitted curve parameters reported for FL model quality (kappa1..kappa6).
DEFAULT_KAPPA = (0.361, 4.348, 1e-3, 0.993, 0.31, 1.743)
DEFAULT_LAMBDA = 3000.0

MAX_BRUTE_FORCE_CLIENTS = 25


class ScenarioError(ValueError):
    """Raised for malformed scenario files."""


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    dataset_size: int
    emd: float
    bid: float

    def __post_init__(self) -> None:
        if self.dataset_size < 1:
            raise ValueError(f"client {self.client_id}: dataset_size must be >= 1")
        if not 0.0 <= self.emd <= 2.0:
            raise ValueError(f"client {self.client_id}: emd must lie in [0, 2]")
        if self.bid < 0:
            raise ValueError(f"client {self.client_id}: bid must be non-negative")


@dataclass(frozen=True)
class SurplusModel:
    kappa: tuple[float, ...] = DEFAULT_KAPPA
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if len(self.kappa) != 6:
            raise ValueError("need exactly six kappa parameters")
        if any(k <= 0 for k in self.kappa):
            raise ValueError("kappa parameters must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        # alpha is maximal at Delta = 0 over Delta >= 0.
        if self.alpha(0.0) >= 1.0:
            raise ValueError("alpha(Delta) must stay below 1")

    def alpha(self, delta: float) -> float:
        k4, k5, k6 = self.kappa[3:]
        return k4 * math.exp(-(((delta + k5) / k6) ** 2))

    def quality_of(self, total_size: float, delta: float) -> float:
        k1, k2, k3 = self.kappa[:3]
        a = self.alpha(delta)
        return a - k1 * math.exp(-k2 * (k3 * total_size) ** a)


def emd(local: RatingHistogram, global_: RatingHistogram) -> float:
    """L1 distance between two rating histograms over the same support."""
    if tuple(local.support) != tuple(global_.support):
        raise ValueError("histograms are defined over different rating supports")
    return float(np.abs(local.mass - global_.mass).sum())


def _as_selection(selection: Sequence[int] | np.ndarray, n: int) -> np.ndarray:
    c = np.asarray(selection, dtype=np.int64)
    if c.shape != (n,):
        raise ValueError(f"selection has length {c.size}, expected {n}")
    if np.any((c != 0) & (c != 1)):
        raise ValueError("selection entries must be 0 or 1")
    return c


def aggregate_stats(selection, profiles: Sequence[ClientProfile]) -> tuple[int, float]:
    """Total dataset size and mean EMD of the selected clients."""
    c = _as_selection(selection, len(profiles))
    total = 0
    emd_sum = 0.0
    count = 0
    for bit, p in zip(c, profiles):
        if bit:
            total += p.dataset_size
            emd_sum += p.emd
            count += 1
    if count == 0:
        return 0, 0.0
    return total, emd_sum / count


def quality(selection, profiles: Sequence[ClientProfile], model: SurplusModel) -> float:
    total, delta = aggregate_stats(selection, profiles)
    return model.quality_of(total, delta)


def total_bids(selection, profiles: Sequence[ClientProfile]) -> float:
    c = _as_selection(selection, len(profiles))
    return float(sum(p.bid for bit, p in zip(c, profiles) if bit))


def surplus(selection, profiles: Sequence[ClientProfile], model: SurplusModel) -> float:
    return model.lam * quality(selection, profiles, model) - total_bids(selection, profiles)


def brute_force_optimal(
    profiles: Sequence[ClientProfile], model: SurplusModel
) -> tuple[np.ndarray, float]:
    """Exhaustive surplus maximisation over all 2**n selections.

    Ties go to fewer selected clients, then to the lexicographically
    smallest selection vector.
    """
    n = len(profiles)
    if n > MAX_BRUTE_FORCE_CLIENTS:
        raise ValueError(
            f"{n} clients is beyond exhaustive search (max {MAX_BRUTE_FORCE_CLIENTS}); "
            "use the auction module"
        )
    sizes = np.array([p.dataset_size for p in profiles], dtype=np.float64)
    emds = np.array([p.emd for p in profiles], dtype=np.float64)
    bids = np.array([p.bid for p in profiles], dtype=np.float64)
    mask, best = kernels.best_subset(sizes, emds, bids, np.asarray(model.kappa, dtype=np.float64), model.lam)
    selection = np.array([(mask >> i) & 1 for i in range(n)], dtype=np.int64)
    return selection, float(best)


def surplus_per_unit_cost(total_surplus: float, payments: float) -> float | None:
    """Surplus per currency unit paid; undefined when nothing is paid."""
    if payments <= 0:
        return None
    return total_surplus / payments


# -- scenarios ---------------------------------------------------------------


@dataclass
class Scenario:
    profiles: list[ClientProfile]
    model: SurplusModel = field(default_factory=SurplusModel)


def generate_profiles(
    n: int,
    seed: int,
    size_median: float = 30.0,
    size_sigma: float = 0.8,
    good_fraction: float = 0.6,
    good_emd: tuple[float, float] = (0.05, 0.35),
    poor_emd: tuple[float, float] = (0.6, 1.4),
    base_cost: float = 5.0,
    rho: float = 0.5,
    noise: float = 0.3,
) -> list[ClientProfile]:
    """Heterogeneous synthetic auction participants.

    Sizes are log-normal around ``size_median``. A ``good_fraction`` of the
    clients draw their EMD uniformly from ``good_emd``, the rest from
    ``poor_emd``. Bids follow ``base_cost * s**rho`` with multiplicative
    uniform noise of relative width ``noise``, so bids track data volume
    but not data quality.
    """
    rng = np.random.default_rng(seed)
    sizes = np.maximum(1, np.rint(size_median * rng.lognormal(0.0, size_sigma, n))).astype(int)
    good = rng.random(n) < good_fraction
    emds = np.where(good, rng.uniform(*good_emd, n), rng.uniform(*poor_emd, n))
    bids = synthesize_bids(sizes, base_cost, rho, noise, rng)
    return [
        ClientProfile(i, int(s), float(e), float(b))
        for i, (s, e, b) in enumerate(zip(sizes, emds, bids))
    ]


def synthesize_bids(sizes, base_cost: float, rho: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    jitter = rng.uniform(-noise, noise, sizes.size) if noise > 0 else np.zeros(sizes.size)
    return np.maximum(0.0, base_cost * sizes**rho * (1.0 + jitter))


def load_scenario(path: str | Path) -> Scenario:
    """Read an INI scenario file.

    ``[model]`` holds ``kappa1``..``kappa6`` and ``lambda`` (all optional);
    ``[clients]`` maps each client id to ``size, emd, bid``.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    if not parser.has_section("clients"):
        raise ScenarioError(f"{path}: missing [clients] section")

    kappa = list(DEFAULT_KAPPA)
    lam = DEFAULT_LAMBDA
    if parser.has_section("model"):
        sec = parser["model"]
        try:
            for i in range(6):
                kappa[i] = sec.getfloat(f"kappa{i + 1}", kappa[i])
            lam = sec.getfloat("lambda", lam)
        except ValueError as exc:
            raise ScenarioError(f"{path}: bad [model] value: {exc}") from exc

    profiles = []
    for key, value in parser["clients"].items():
        try:
            cid = int(key)
            size_s, emd_s, bid_s = (v.strip() for v in value.split(","))
            profiles.append(ClientProfile(cid, int(size_s), float(emd_s), float(bid_s)))
        except ValueError as exc:
            raise ScenarioError(f"{path}: bad client line {key!r} = {value!r}: {exc}") from exc
    if not profiles:
        raise ScenarioError(f"{path}: no clients listed")
    profiles.sort(key=lambda p: p.client_id)
    if [p.client_id for p in profiles] != list(range(len(profiles))):
        raise ScenarioError(f"{path}: client ids must be 0..n-1")
    try:
        model = SurplusModel(tuple(kappa), lam)
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return Scenario(profiles, model)


def dump_scenario(scenario: Scenario, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser["model"] = {f"kappa{i + 1}": repr(k) for i, k in enumerate(scenario.model.kappa)}
    parser["model"]["lambda"] = repr(scenario.model.lam)
    parser["clients"] = {
        str(p.client_id): f"{p.dataset_size}, {p.emd!r}, {p.bid!r}" for p in scenario.profiles
    }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
