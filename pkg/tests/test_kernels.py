import os
import subprocess
import sys

import numpy as np
import pytest

from parabolic_greens import _fallback, _kernels
from parabolic_greens.solver import Grid, ParabolicSolver, heat_coefficient

compiled = pytest.mark.skipif(not _kernels.compiled_available(),
                              reason="compiled extension not built")


def random_bands(rng, rows, n, diag=4.0):
    lo = rng.uniform(-1, 0, (rows, n))
    up = rng.uniform(-1, 0, (rows, n))
    di = diag + rng.uniform(0, 1, (rows, n))
    return lo, di, up


def dense_tridiag(lo, di, up):
    return np.diag(di) + np.diag(lo[1:], -1) + np.diag(up[:-1], 1)


@pytest.mark.parametrize("rows", [1, 6])
def test_fallback_forward_matches_dense_recursion(rows):
    rng = np.random.default_rng(rows)
    n, S, nc = 9, 6, 3
    P = random_bands(rng, rows, n)
    Q = random_bands(rng, rows, n, diag=1.0)
    f = rng.standard_normal((S + 1, n, nc))
    out = np.zeros_like(f)
    out[0] = rng.standard_normal((n, nc))
    x = out[0].copy()
    _fallback.cn_forward_tridiag(*P, *Q, f, 0.1, out)
    for s in range(S):
        r = 0 if rows == 1 else s
        rhs = dense_tridiag(Q[0][r], Q[1][r], Q[2][r]) @ x + 0.1 * (f[s] + f[s + 1])
        x = np.linalg.solve(dense_tridiag(P[0][r], P[1][r], P[2][r]), rhs)
        assert np.allclose(out[s + 1], x, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("rows", [1, 5])
def test_fallback_adjoint_is_transpose(rows):
    rng = np.random.default_rng(10 + rows)
    n, S = 7, 5
    P = random_bands(rng, rows, n)
    Q = random_bands(rng, rows, n, diag=1.0)
    # transposed bands: lower of P^T is the shifted upper of P
    def transpose(b):
        lo, di, up = b
        tl, tu = np.zeros_like(lo), np.zeros_like(up)
        tl[:, 1:], tu[:, :-1] = up[:, :-1], lo[:, 1:]
        return tl, di.copy(), tu
    PT, QT = transpose(P), transpose(Q)
    f = rng.standard_normal((S + 1, n, 1))
    z = rng.standard_normal((S + 1, n, 1))
    u = np.zeros_like(f)
    _fallback.cn_forward_tridiag(*P, *Q, f, 0.05, u)
    v = np.zeros_like(z)
    _fallback.cn_adjoint_tridiag(*PT, *QT, z, 0.05, v)
    assert np.sum(u * z) == pytest.approx(np.sum(f * v), rel=1e-12)


@compiled
@pytest.mark.parametrize("rows", [1, 6])
def test_compiled_sweeps_match_fallback(rows):
    core = _kernels.get_backend("compiled")
    rng = np.random.default_rng(20 + rows)
    n, S, nc = 17, 6, 4
    P = random_bands(rng, rows, n)
    Q = random_bands(rng, rows, n, diag=1.0)
    f = rng.standard_normal((S + 1, n, nc))
    for name in ("cn_forward_tridiag", "cn_adjoint_tridiag"):
        a, b = np.zeros_like(f), np.zeros_like(f)
        getattr(_fallback, name)(*P, *Q, f, 0.3, a)
        getattr(core, name)(*P, *Q, f, 0.3, b)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


@compiled
def test_compiled_sweeps_handle_empty_inputs():
    core = _kernels.get_backend("compiled")
    P = (np.zeros((1, 0)),) * 3
    f = np.zeros((4, 0, 2))
    core.cn_forward_tridiag(*P, *P, f, 0.1, f.copy())
    core.cn_adjoint_tridiag(*P, *P, f, 0.1, f.copy())


@compiled
@pytest.mark.parametrize("ncol,rank", [(8, 8), (12, 5), (0, 0)])
def test_compiled_mgs_matches_fallback(ncol, rank):
    core = _kernels.get_backend("compiled")
    rng = np.random.default_rng(ncol)
    m = 40
    w = rng.uniform(0.5, 1.5, m)
    y = rng.standard_normal((ncol, rank)) @ rng.standard_normal((rank, m)) if ncol else np.zeros((0, m))
    qa, ka = _fallback.weighted_mgs(y, w, 1e-10)
    qb, kb = core.weighted_mgs(np.ascontiguousarray(y), w, 1e-10)
    assert np.array_equal(ka, kb) and len(ka) == rank
    assert np.allclose(qa, qb, atol=1e-12)
    if rank:
        assert np.allclose((qa * w) @ qa.T, np.eye(rank), atol=1e-12)


@compiled
def test_solver_backends_agree():
    g = Grid(2, 8, 16)
    coeff = heat_coefficient(2)
    f = np.random.default_rng(0).standard_normal(g.shape)
    a = ParabolicSolver(coeff, g, backend="python")
    b = ParabolicSolver(coeff, g, backend="compiled")
    assert np.allclose(a.forward(f), b.forward(f), rtol=1e-11, atol=1e-13)
    assert np.allclose(a.adjoint(f), b.adjoint(f), rtol=1e-11, atol=1e-13)


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")


def test_pure_python_switch():
    env = dict(os.environ, PGREEN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c",
                          "import parabolic_greens as p; print(p.KERNEL_BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
