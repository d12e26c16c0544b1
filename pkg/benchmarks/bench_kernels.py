"""Compiled vs numpy kernels: one optimiser step, and a full training run.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

The full-training comparison runs each backend in a subprocess because the
backend is fixed at import time (``BIOAGE_BACKEND=python`` forces numpy).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bioage import _kernels_py
from bioage.hetreg import TrainConfig, init_params

try:
    from bioage import _kernels as compiled
except ImportError:
    compiled = None

TRAIN_SNIPPET = """
import time, numpy as np
from bioage._backend import BACKEND
from bioage.cohort import GeneratorConfig, generate_cohort
from bioage.hetreg import TrainConfig, train
from bioage.iterate import subjects_to_batch
b = subjects_to_batch(generate_cohort(GeneratorConfig(n_typical=250, n_atypical_per_level={0.5: 0, 1: 0, 2: 0})))
t = time.perf_counter()
train(b, TrainConfig(hidden_sizes=[16], fusion_width=16, epochs=20, seed=0))
print(BACKEND, time.perf_counter() - t)
"""


def step_timer(mod, batch, hidden, d=32, repeat=2000):
    rng = np.random.default_rng(0)
    p = init_params(d, TrainConfig(hidden_sizes=hidden, fusion_width=16), rng)
    X = rng.normal(size=(batch, d))
    sex = rng.integers(0, 2, batch).astype(float)
    ca = rng.uniform(48, 97, batch)
    g = np.empty_like(p.flat)
    m, v = np.zeros_like(p.flat), np.zeros_like(p.flat)
    t = [0]

    def step():
        mod.loss_grad(p.flat, p.dims, p.fusion_index, X, sex, ca, 70.0, 10.0, 4.0, g)
        t[0] += 1
        mod.adam_update(p.flat, g, m, v, 1e-4, 0.9, 0.999, 1e-8, t[0])

    step()
    return min(timeit.repeat(step, number=repeat, repeat=3)) / repeat


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the numpy backend is available")

    print(f"{'batch':>6} {'hidden':>10} {'numpy us':>10} {'compiled us':>12} {'speedup':>8}")
    for batch, hidden in ((1, [16]), (32, [16]), (32, [64, 32]), (256, [64, 32])):
        py = step_timer(_kernels_py, batch, hidden, repeat=args.repeat) * 1e6
        if compiled is not None:
            c = step_timer(compiled, batch, hidden, repeat=args.repeat) * 1e6
            print(f"{batch:>6} {str(hidden):>10} {py:>10.1f} {c:>12.1f} {py / c:>7.2f}x")
        else:
            print(f"{batch:>6} {str(hidden):>10} {py:>10.1f} {'-':>12} {'-':>8}")

    print("\nfull training run (2000 chunks, 20 epochs):")
    for backend in ("python", "compiled"):
        env = dict(os.environ, BIOAGE_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print(f"  {name:>8}: {float(secs):.2f} s")


if __name__ == "__main__":
    main()
