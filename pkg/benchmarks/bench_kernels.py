"""Compare the compiled kernels with the NumPy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times one local training call (``neumf.train_local``) at the default model
size and one exhaustive subset search, per backend, and prints the best
wall time of ``--repeat`` runs together with the speed-up.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fedrec import kernels, neumf
from fedrec.data import TrainBatch
from fedrec.economics import DEFAULT_KAPPA, DEFAULT_LAMBDA


def best_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def training_case(n_instances: int):
    hyper = neumf.Hyperparams(local_epochs=1)
    params = neumf.init_params(943, 1682, hyper, 0)
    r = np.random.default_rng(0)
    batch = TrainBatch(
        r.integers(943, size=n_instances), r.integers(1682, size=n_instances),
        r.random(n_instances), np.ones(n_instances),
    )
    return lambda backend: neumf.train_local(params, batch, hyper, 0, backend=backend)


def subset_case(n_clients: int):
    r = np.random.default_rng(0)
    sizes = r.integers(1, 200, n_clients).astype(float)
    emds, bids = r.uniform(0, 1.5, n_clients), r.uniform(0, 80, n_clients)
    kappa = np.array(DEFAULT_KAPPA)
    return lambda backend: kernels.get(backend).best_subset(sizes, emds, bids, kappa, DEFAULT_LAMBDA)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--instances", type=int, default=5000, help="training instances per local call")
    ap.add_argument("--clients", type=int, default=14, help="clients in the subset search")
    args = ap.parse_args()
    if not kernels.extension_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    cases = {
        f"train_local ({args.instances} instances, batch 64)": training_case(args.instances),
        f"best_subset ({args.clients} clients, 2^{args.clients} subsets)": subset_case(args.clients),
    }
    print(f"{'kernel':48s} {'python [s]':>11s} {'cython [s]':>11s} {'speed-up':>9s}")
    for name, run in cases.items():
        py = best_time(lambda: run("python"), args.repeat)
        cy = best_time(lambda: run("cython"), args.repeat)
        print(f"{name:48s} {py:11.4f} {cy:11.4f} {py / cy:8.1f}x")


if __name__ == "__main__":
    main()
