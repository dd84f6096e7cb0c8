"""Timing comparison of the compiled and pure-numpy kernel paths.

Usage:  python3 benchmarks/bench_kernels.py

The script re-executes itself with BDSDE_NO_NUMBA=1 to time the fallback,
so one invocation prints both columns.  The workloads are the hot pieces of
the lattice dynamic program: the Gaussian convolution of piecewise-linear
continuation values, and one full uncertain-volatility solve.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

CASES = [
    ("moments n=401",  401, 0.18, 200),
    ("moments n=1601", 1601, 0.09, 50),
]


def time_moments(n_knots, sigma, reps):
    from bdsde._accel import pl_gauss_moments

    knots = np.linspace(-8.0, 8.0, n_knots)
    vals = np.cos(knots) + 0.1 * knots**2
    mus = knots.copy()
    pl_gauss_moments(knots, vals, mus, sigma)  # warm-up / jit compile
    t0 = time.perf_counter()
    for _ in range(reps):
        pl_gauss_moments(knots, vals, mus, sigma)
    return (time.perf_counter() - t0) / reps


def time_solve():
    from bdsde.grids import build_time_grid, build_volatility_grid, sample_backward_path
    from bdsde.second_order import DpOptions, TbdsdeProblem, solve_dp

    prob = TbdsdeProblem(
        terminal=lambda x: x**2,
        F=lambda t, x, y, z, a: np.zeros_like(np.asarray(x, dtype=float)),
        g=lambda t, x, y, z: np.zeros_like(np.asarray(x, dtype=float)),
        volgrid=build_volatility_grid(0.5, 2.0, 5))
    grid = build_time_grid(0, 1, 64)
    w = sample_backward_path(grid, 1, seed=1)
    solve_dp(prob, grid, w, x0=1.0, opts=DpOptions(x_steps=400))  # warm-up
    t0 = time.perf_counter()
    sol = solve_dp(prob, grid, w, x0=1.0, opts=DpOptions(x_steps=400))
    return time.perf_counter() - t0, sol.y0


def measure():
    from bdsde import _accel

    out = {"backend": "numba" if _accel.HAS_NUMBA else "numpy"}
    for name, n, sigma, reps in CASES:
        out[name] = time_moments(n, sigma, reps)
    solve_t, y0 = time_solve()
    out["solve_dp n=64 x=400"] = solve_t
    out["y0"] = y0
    return out


def main():
    if os.environ.get("_BENCH_CHILD"):
        print(json.dumps(measure()))
        return

    here = measure()
    env = dict(os.environ, BDSDE_NO_NUMBA="1", _BENCH_CHILD="1")
    raw = subprocess.run([sys.executable, os.path.abspath(__file__)], env=env,
                         capture_output=True, text=True, check=True).stdout
    other = json.loads(raw.strip().splitlines()[-1])

    cols = [k for k, *_ in CASES] + ["solve_dp n=64 x=400"]
    print(f"{'workload':24s} {here['backend']:>12s} {other['backend']:>12s} {'speedup':>9s}")
    for k in cols:
        ratio = other[k] / here[k]
        print(f"{k:24s} {here[k] * 1e3:10.3f}ms {other[k] * 1e3:10.3f}ms {ratio:8.2f}x")
    drift = abs(here["y0"] - other["y0"])
    print(f"\nvalue agreement between paths: |dy0| = {drift:.3e}")


if __name__ == "__main__":
    main()
