"""Time the compiled and numpy chain kernels on the same E-step and EM workloads.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import sys
import timeit
from pathlib import Path

import numpy as np

from i2c import kernels
from i2c.model import cost_to_likelihood, load_scenario
from i2c.solver import e_step, em_solve

sys.path.insert(0, str(Path(__file__).parent.parent / "tests"))
from helpers import lqr_regime_scenario  # noqa: E402

SCEN = Path(__file__).parent.parent / "scenarios"


def workloads():
    rng = np.random.default_rng(0)
    small, _, _ = lqr_regime_scenario(rng, dx=2, du=1, T=20)
    large, _, _ = lqr_regime_scenario(rng, dx=4, du=2, T=200)
    switch = load_scenario(SCEN / "switch_tracking.json")
    return [
        ("e-step dx=2 T=20", lambda b: e_step(small, cost_to_likelihood(small.cost, 1.0), backend=b)),
        ("e-step dx=4 T=200", lambda b: e_step(large, cost_to_likelihood(large.cost, 1.0), backend=b)),
        ("em switch T=100", lambda b: em_solve(switch, backend=b)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = ["python"] + (["compiled"] if kernels.HAVE_COMPILED else [])
    if len(backends) == 1:
        print("compiled kernel not built; timing the numpy backend only")
    print(f"{'workload':<22}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, fn in workloads():
        times = []
        for b in backends:
            fn(b)  # warm-up
            n = 3
            best = min(timeit.repeat(lambda: fn(b), number=n, repeat=args.repeat)) / n
            times.append(best)
        line = f"{name:<22}" + "".join(f"{t * 1e3:>11.3f} ms" for t in times)
        if len(times) == 2:
            line += f"   {times[0] / times[1]:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
