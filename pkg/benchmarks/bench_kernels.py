"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Kernel timings call both implementations in one process. ``--end-to-end``
also times a small Table-1 slice in two subprocesses, one of them with
VBGMM_DISABLE_NUMBA=1, so the whole fit path is compared.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vbgmm import kernels
from vbgmm._accel import NUMBA_AVAILABLE

END_TO_END = """
import time
from vbgmm import harness
cfg = harness.table1_config(grid={"n": [1000, 5000], "p": [10, 50], "sigma2_w": [[1, 10]]}, replications=10,
                            output_dir="/tmp/vbgmm-bench")
harness.run_table1(cfg.with_overrides(replications=1), write=False)  # load compiled kernels
t = time.perf_counter()
harness.run_table1(cfg, write=False)
print(time.perf_counter() - t)
"""


def cases(rng):
    x = np.ascontiguousarray(rng.normal(size=(5000, 50)))
    m = np.ascontiguousarray(rng.normal(size=(2, 50)))
    x_small = np.ascontiguousarray(rng.normal(size=(50, 2)))
    thetas = np.ascontiguousarray(rng.normal(size=(256, 2, 2)))
    xs = np.ascontiguousarray(rng.normal(size=(100_000, 3)))
    m3 = np.ascontiguousarray(rng.normal(size=(2, 3)))
    trace_d = np.array([0.02, 0.03])
    return [
        ("cavi sweep, n=5000 p=50", kernels._cavi_sweep_jit, kernels._cavi_sweep_numpy, (x, m, trace_d, 25.0)),
        ("score/Hessian sums, 1e5 draws p=3", kernels._score_hessian_sums_jit, kernels._score_hessian_sums_numpy,
         (xs, m3)),
        ("loglik+grad batch, 256 thetas n=50", kernels._loglik_grad_batch_jit, kernels._loglik_grad_batch_numpy,
         (thetas, x_small, True)),
    ]


def best_of(fn, args, repeat):
    fn(*args)  # warm-up; triggers compilation for the jit path
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def end_to_end():
    times = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, VBGMM_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        times[label] = float(out.stdout.strip().splitlines()[-1])
    return times


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, jit, ref, kargs in cases(np.random.default_rng(0)):
        a = best_of(jit, kargs, args.repeat)
        b = best_of(ref, kargs, args.repeat)
        print(f"{name:40s} {1e3 * a:10.2f} {1e3 * b:10.2f} {b / a:8.1f}x")
    if args.end_to_end:
        t = end_to_end()
        print(f"{'table1 slice (4 cells x 10 reps)':40s} {1e3 * t['numba']:10.0f} {1e3 * t['numpy']:10.0f} "
              f"{t['numpy'] / t['numba']:8.1f}x")


if __name__ == "__main__":
    main()
