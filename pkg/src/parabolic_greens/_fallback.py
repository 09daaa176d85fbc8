"""Pure-Python implementations of the compiled kernels in ``_core.pyx``.

These are selected automatically when the extension module is missing, and
they double as the reference the compiled versions are tested against.
"""
import numpy as np
from scipy.linalg import solve_banded


def _banded(lo, di, up):
    n = di.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = up[:-1]
    ab[1] = di
    ab[2, :-1] = lo[1:]
    return ab


def _matvec(lo, di, up, x):
    y = di[:, None] * x
    if x.shape[0] > 1:
        y[:-1] += up[:-1, None] * x[1:]
        y[1:] += lo[1:, None] * x[:-1]
    return y


def cn_forward_tridiag(pl, pd, pu, ql, qd, qu, f, half_dt, out):
    """Crank-Nicolson forward sweep, see the compiled twin for the contract."""
    S = f.shape[0] - 1
    if f.shape[1] == 0 or f.shape[2] == 0 or S <= 0:
        return
    ab_const = _banded(pl[0], pd[0], pu[0]) if pl.shape[0] == 1 else None
    for s in range(S):
        r = 0 if ql.shape[0] == 1 else s
        rhs = _matvec(ql[r], qd[r], qu[r], out[s]) + half_dt * (f[s] + f[s + 1])
        if ab_const is None:
            ab = _banded(pl[s], pd[s], pu[s])
        else:
            ab = ab_const
        out[s + 1] = solve_banded((1, 1), ab, rhs, check_finite=False)


def cn_adjoint_tridiag(ptl, ptd, ptu, qtl, qtd, qtu, z, half_dt, out):
    """Transpose of :func:`cn_forward_tridiag`; bands are the transposed ones."""
    S = z.shape[0] - 1
    out[...] = 0.0
    if z.shape[1] == 0 or z.shape[2] == 0 or S <= 0:
        return
    ab_const = _banded(ptl[0], ptd[0], ptu[0]) if ptl.shape[0] == 1 else None
    lam = np.array(z[S], dtype=np.float64)
    for s in range(S - 1, -1, -1):
        ab = ab_const if ab_const is not None else _banded(ptl[s], ptd[s], ptu[s])
        a = solve_banded((1, 1), ab, lam, check_finite=False)
        out[s + 1] += half_dt * a
        out[s] += half_dt * a
        r = 0 if qtl.shape[0] == 1 else s
        lam = _matvec(qtl[r], qtd[r], qtu[r], a) + z[s]


def weighted_mgs(y, w, drop_tol):
    """Weighted modified Gram-Schmidt with one reorthogonalisation pass."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    ncol, m = y.shape
    q = np.zeros((ncol, m))
    kept = np.zeros(ncol, dtype=np.int64)
    if ncol == 0:
        return q, kept
    scale = np.sqrt(np.max(np.sum(w * y * y, axis=1)))
    thresh = drop_tol * scale
    r = 0
    if scale > 0.0:
        for j in range(ncol):
            v = y[j].copy()
            for _ in range(2):
                for i in range(r):
                    v -= np.dot(w * v, q[i]) * q[i]
            nrm = np.sqrt(np.dot(w * v, v))
            if nrm <= thresh or nrm == 0.0:
                continue
            q[r] = v / nrm
            kept[r] = j
            r += 1
    return q[:r].copy(), kept[:r].copy()
