"""Reproducible experiment recipes shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._blocks import local_axis_weights, weighted_svd
from .errors import UsageError
from .geometry import ADMISSIBLE, build_partition
from .rsvd import SolverBlockOperator, empirical_bound_trial
from .sampling import CovarianceKernel, spectral_decompose
from .solver import Grid, HeatSeriesOracle, ParabolicSolver, heat_coefficient
from .theory import diagonal_mass, fit_rank_polynomial, loglog_slope, numerical_ranks

DECAY_TOLS = tuple(10.0 ** -e for e in range(2, 11))


def _spread(indices: np.ndarray, count: int) -> np.ndarray:
    if indices.size <= count:
        return indices
    pick = np.unique(np.linspace(0, indices.size - 1, count).round().astype(int))
    return indices[pick]


@dataclass
class DecayResult:
    rows: list
    fits: dict = field(default_factory=dict)      # level -> (coeffs, R^2)
    max_rank: dict = field(default_factory=dict)  # level -> {tol: rank}


def svd_decay(levels=(2, 3, 4), per_level: int = 4, nodes: int = 12, tols=DECAY_TOLS,
              oracle: HeatSeriesOracle | None = None, rho: float = 1.0,
              degree: int = 4) -> DecayResult:
    """Numerical ranks of heat-kernel admissible blocks against tolerance.

    For each level a spread of ``per_level`` admissible (not causal-zero)
    leaves is sampled on ``nodes`` uniform nodes per axis of each closed box;
    the weighted singular values give ranks at every tolerance. The largest
    rank per tolerance is fit by a polynomial in ``log(1/tol)``.
    """
    oracle = oracle or HeatSeriesOracle(1, 1.0)
    n, T = oracle.n, oracle.T
    tree = build_partition(n, max(levels), rho=rho)
    rows = []
    res = DecayResult(rows)
    for L in levels:
        cand = np.nonzero((tree.status == ADMISSIBLE) & (tree.level == L))[0]
        if cand.size == 0:
            raise UsageError(f"no admissible leaves at level {L}")
        worst = np.zeros(len(tols), dtype=int)
        for i in _spread(cand, per_level):
            qx, qy = tree.leaf_boxes(int(i))
            tx = np.linspace(qx.t0, qx.t1, nodes) * T
            ty = np.linspace(qy.t0, qy.t1, nodes) * T
            xs = [np.linspace(lo, hi, nodes) for lo, hi in zip(qx.lo, qx.hi)]
            ys = [np.linspace(lo, hi, nodes) for lo, hi in zip(qy.lo, qy.hi)]
            G = oracle.block(xs, tx, ys, ty)
            half = G.ndim // 2
            mat = G.reshape(int(np.prod(G.shape[:half])), -1)
            wx = _tensor_weights([tx] + xs)
            wy = _tensor_weights([ty] + ys)
            _, s, _ = weighted_svd(mat, wx, wy)
            ranks = numerical_ranks(s, tols)
            worst = np.maximum(worst, ranks)
            for tol, r in zip(tols, ranks):
                rows.append({"level": L, "leaf": int(i), "tol": tol, "rank": int(r)})
        res.max_rank[L] = dict(zip(tols, worst.tolist()))
        res.fits[L] = fit_rank_polynomial(worst, tols, degree)
    return res


def _tensor_weights(axes) -> np.ndarray:
    w = np.ones(())
    for a in axes:
        w = np.multiply.outer(w, local_axis_weights(len(a), float(a[1] - a[0])))
    return w.ravel()


@dataclass
class MassCurve:
    rows: list
    slope: float
    predicted: float


def diagonal_mass_curve(p: int = 1, r_values=None, oracle: HeatSeriesOracle | None = None) -> MassCurve:
    """Diagonal-band mass over ``r_t`` and its log-log slope."""
    oracle = oracle or HeatSeriesOracle(1, 1.0)
    r_values = np.logspace(-3, -1, 9) if r_values is None else np.asarray(r_values, float)
    rows, masses = [], []
    pred = math.nan
    for r in r_values:
        dm = diagonal_mass(oracle, float(r), p, oracle.T)
        masses.append(dm.mass)
        pred = dm.predicted_exponent
        rows.append({"r_t": float(r), "mass": dm.mass, "relative": dm.ratio})
    slope = loglog_slope(r_values, masses)
    for row in rows:
        row["slope"] = slope
        row["predicted"] = pred
    return MassCurve(rows, slope, pred)


def heat_setup(n: int = 1, nx: int = 64, nt: int = 256, T: float = 1.0, substeps: int = 1,
               backend: str | None = None):
    grid = Grid(n, nx, nt, T)
    return ParabolicSolver(heat_coefficient(n), grid, substeps=substeps, backend=backend)


def pick_block(tree, grid, level: int) -> int:
    """A fixed admissible leaf at ``level``: the largest separation in time.

    Ties go to the lowest leaf index.
    """
    cand = np.nonzero((tree.status == ADMISSIBLE) & (tree.level == level))[0]
    if cand.size == 0:
        raise UsageError(f"no learnable admissible leaf at level {level}")
    gap = tree.ix[cand, -1] - tree.iy[cand, -1]
    return int(cand[np.argmax(gap)])


def rsvd_bound(solver: ParabolicSolver, kernel: CovarianceKernel, block_level: int = 2,
               k: int = 10, p: int = 10, trials: int = 50, seed: int = 0,
               t: float = math.e, s: float = 3.0, k_max: int = 200):
    """Monte Carlo check of the randomized range-finder bound on a fixed block."""
    tree = build_partition(solver.grid.n, block_level)
    i = pick_block(tree, solver.grid, block_level)
    qx, qy = tree.leaf_boxes(i)
    op = SolverBlockOperator(solver, solver.grid.box_slices(qx), solver.grid.box_slices(qy))
    dec = spectral_decompose(kernel, solver.grid, min(k_max, solver.grid.size))
    rep = empirical_bound_trial(op, dec, k, p, trials, seed, t, s)
    rows = [{"trial": j, "rel_error": e, "bound": rep.bound, "floor": rep.floor,
             "exceeded": int(e > rep.bound)} for j, e in enumerate(rep.errors)]
    return rep, rows, i
