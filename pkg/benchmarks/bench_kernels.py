"""Compare the compiled kernels with the pure-Python fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time for each kernel and backend, plus the
speed-up. The compiled rows are skipped when the extension is not built.
"""
import argparse
import timeit

import numpy as np

from parabolic_greens import _kernels
from parabolic_greens.solver import Grid, ParabolicSolver, heat_coefficient


def bands(rng, n, diag):
    return (rng.uniform(-1, 0, (1, n)), diag + rng.uniform(0, 1, (1, n)),
            rng.uniform(-1, 0, (1, n)))


def cases(rng):
    n, S, nc = 255, 256, 20
    P, Q = bands(rng, n, 4.0), bands(rng, n, 1.0)
    f = rng.standard_normal((S + 1, n, nc))
    out = np.zeros_like(f)
    w = rng.uniform(0.5, 1.5, 4000)
    y = rng.standard_normal((40, 4000))

    def sweep(kernel):
        return lambda name, k: getattr(k, kernel)(*P, *Q, f, 0.01, out)

    g = Grid(1, 64, 256)
    rhs = rng.standard_normal(g.shape)

    def solve(name, k):
        ParabolicSolver(heat_coefficient(1), g, backend=name).forward(rhs)

    return {
        f"cn_forward_tridiag n={n} steps={S} cols={nc}": sweep("cn_forward_tridiag"),
        f"cn_adjoint_tridiag n={n} steps={S} cols={nc}": sweep("cn_adjoint_tridiag"),
        "weighted_mgs 40 x 4000": lambda name, k: k.weighted_mgs(y, w, 1e-12),
        "full forward solve 64x256": solve,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    backends = {"python": _kernels.get_backend("python")}
    if _kernels.compiled_available():
        backends["compiled"] = _kernels.get_backend("compiled")
    rng = np.random.default_rng(0)
    print(f"{'kernel':45s} {'backend':9s} {'best [ms]':>10s} {'speed-up':>9s}")
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in backends.items():
            fn(name, mod)  # warm-up
            times[name] = min(timeit.repeat(lambda: fn(name, mod), number=1, repeat=a.repeat))
        for name, t in times.items():
            up = times["python"] / t
            print(f"{label:45s} {name:9s} {1e3 * t:10.2f} {up:8.1f}x")


if __name__ == "__main__":
    main()
