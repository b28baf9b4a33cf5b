from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fedrec.data import Interaction, synthetic_interactions
from fedrec.neumf import Hyperparams, init_params

REPO = Path(__file__).resolve().parents[1]
ML100K = REPO / "data" / "ml-100k" / "ratings.dat"


@pytest.fixture
def tiny_hyper() -> Hyperparams:
    return Hyperparams(factors=2, mlp_layers=(4,), batch_size=8, local_epochs=1)


@pytest.fixture
def tiny_params(tiny_hyper):
    return init_params(3, 4, tiny_hyper, seed=11)


@pytest.fixture
def small_interactions() -> list[Interaction]:
    return synthetic_interactions(40, 60, 12, seed=5)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
