# cython: language_level=3
"""Compiled kernels for the one-dimensional Crank-Nicolson sweeps and the
weighted modified Gram-Schmidt used by the block sketches.

All routines operate on preallocated C-contiguous float64 arrays and release
the GIL, so several blocks can be processed concurrently from a thread pool.
The pure-Python twins live in ``_fallback.py`` and must produce the same
results up to round-off.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _factor(const double[::1] lo, const double[::1] di,
                         const double[::1] up, double* cp, double* inv,
                         Py_ssize_t n) noexcept nogil:
    # Thomas factorisation without pivoting (the CN matrices are
    # strictly diagonally dominant).
    cdef Py_ssize_t i
    cdef double d
    inv[0] = 1.0 / di[0]
    cp[0] = up[0] * inv[0]
    for i in range(1, n):
        d = di[i] - lo[i] * cp[i - 1]
        inv[i] = 1.0 / d
        cp[i] = up[i] * inv[i]


cdef inline void _solve(const double[::1] lo, const double* cp, const double* inv,
                        double[:, ::1] x, Py_ssize_t n, Py_ssize_t nc) noexcept nogil:
    # In-place solve of the factored tridiagonal system for nc right-hand sides.
    cdef Py_ssize_t i, c
    cdef double a, f
    for c in range(nc):
        x[0, c] = x[0, c] * inv[0]
    for i in range(1, n):
        a = lo[i]
        f = inv[i]
        for c in range(nc):
            x[i, c] = (x[i, c] - a * x[i - 1, c]) * f
    for i in range(n - 2, -1, -1):
        a = cp[i]
        for c in range(nc):
            x[i, c] = x[i, c] - a * x[i + 1, c]


cdef inline void _matvec(const double[::1] lo, const double[::1] di,
                         const double[::1] up, double[:, ::1] x,
                         double[:, ::1] y, Py_ssize_t n, Py_ssize_t nc) noexcept nogil:
    # y = B x for a tridiagonal B given by its three bands.
    cdef Py_ssize_t i, c
    for c in range(nc):
        y[0, c] = di[0] * x[0, c]
        if n > 1:
            y[0, c] += up[0] * x[1, c]
    for i in range(1, n - 1):
        for c in range(nc):
            y[i, c] = lo[i] * x[i - 1, c] + di[i] * x[i, c] + up[i] * x[i + 1, c]
    if n > 1:
        for c in range(nc):
            y[n - 1, c] = lo[n - 1] * x[n - 2, c] + di[n - 1] * x[n - 1, c]


def cn_forward_tridiag(const double[:, ::1] pl, const double[:, ::1] pd,
                       const double[:, ::1] pu, const double[:, ::1] ql,
                       const double[:, ::1] qd, const double[:, ::1] qu,
                       const double[:, :, ::1] f, double half_dt,
                       double[:, :, ::1] out):
    """Crank-Nicolson forward sweep.

    ``out[s + 1] = P_s^{-1} (Q_s out[s] + half_dt * (f[s] + f[s + 1]))``
    for ``s = 0 .. S-1``; ``out[0]`` is used as given. Band arrays have
    either one row (time-independent operator) or ``S`` rows.
    """
    cdef Py_ssize_t S = f.shape[0] - 1
    cdef Py_ssize_t n = f.shape[1]
    cdef Py_ssize_t nc = f.shape[2]
    cdef Py_ssize_t s, i, c, row
    cdef bint const_p = pl.shape[0] == 1
    cdef bint const_q = ql.shape[0] == 1
    if n == 0 or nc == 0 or S <= 0:
        return
    cdef double* cp = <double*> malloc(n * sizeof(double))
    cdef double* inv = <double*> malloc(n * sizeof(double))
    cdef double[:, ::1] rhs = np.empty((n, nc), dtype=np.float64)
    if cp == NULL or inv == NULL:
        free(cp)
        free(inv)
        raise MemoryError()
    try:
        with nogil:
            if const_p:
                _factor(pl[0], pd[0], pu[0], cp, inv, n)
            for s in range(S):
                row = 0 if const_q else s
                _matvec(ql[row], qd[row], qu[row], out[s], rhs, n, nc)
                for i in range(n):
                    for c in range(nc):
                        rhs[i, c] = rhs[i, c] + half_dt * (f[s, i, c] + f[s + 1, i, c])
                row = 0 if const_p else s
                if not const_p:
                    _factor(pl[row], pd[row], pu[row], cp, inv, n)
                _solve(pl[row], cp, inv, rhs, n, nc)
                for i in range(n):
                    for c in range(nc):
                        out[s + 1, i, c] = rhs[i, c]
    finally:
        free(cp)
        free(inv)


def cn_adjoint_tridiag(const double[:, ::1] ptl, const double[:, ::1] ptd,
                       const double[:, ::1] ptu, const double[:, ::1] qtl,
                       const double[:, ::1] qtd, const double[:, ::1] qtu,
                       const double[:, :, ::1] z, double half_dt,
                       double[:, :, ::1] out):
    """Euclidean transpose of :func:`cn_forward_tridiag` (with zero ``out[0]``).

    The band arrays must hold the transposed step matrices. ``out`` is
    overwritten.
    """
    cdef Py_ssize_t S = z.shape[0] - 1
    cdef Py_ssize_t n = z.shape[1]
    cdef Py_ssize_t nc = z.shape[2]
    cdef Py_ssize_t s, i, c, row
    cdef bint const_p = ptl.shape[0] == 1
    cdef bint const_q = qtl.shape[0] == 1
    out[:, :, :] = 0.0
    if n == 0 or nc == 0 or S <= 0:
        return
    cdef double* cp = <double*> malloc(n * sizeof(double))
    cdef double* inv = <double*> malloc(n * sizeof(double))
    cdef double[:, ::1] lam = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] a = np.empty((n, nc), dtype=np.float64)
    if cp == NULL or inv == NULL:
        free(cp)
        free(inv)
        raise MemoryError()
    try:
        with nogil:
            if const_p:
                _factor(ptl[0], ptd[0], ptu[0], cp, inv, n)
            for i in range(n):
                for c in range(nc):
                    lam[i, c] = z[S, i, c]
            for s in range(S - 1, -1, -1):
                row = 0 if const_p else s
                for i in range(n):
                    for c in range(nc):
                        a[i, c] = lam[i, c]
                if not const_p:
                    _factor(ptl[row], ptd[row], ptu[row], cp, inv, n)
                _solve(ptl[row], cp, inv, a, n, nc)
                for i in range(n):
                    for c in range(nc):
                        out[s + 1, i, c] = out[s + 1, i, c] + half_dt * a[i, c]
                        out[s, i, c] = out[s, i, c] + half_dt * a[i, c]
                row = 0 if const_q else s
                _matvec(qtl[row], qtd[row], qtu[row], a, lam, n, nc)
                for i in range(n):
                    for c in range(nc):
                        lam[i, c] = lam[i, c] + z[s, i, c]
    finally:
        free(cp)
        free(inv)


def weighted_mgs(const double[:, ::1] y, const double[::1] w, double drop_tol):
    """Modified Gram-Schmidt with one reorthogonalisation pass.

    Parameters
    ----------
    y : (ncol, m) array
        Columns to orthonormalise, stored row-wise.
    w : (m,) array
        Positive quadrature weights defining the inner product.
    drop_tol : float
        A column is discarded when its residual norm is at most
        ``drop_tol`` times the largest input column norm.

    Returns
    -------
    q : (r, m) array
        Orthonormal columns (row-wise).
    kept : (r,) int64 array
        Indices of the input columns that produced each output column.
    """
    cdef Py_ssize_t ncol = y.shape[0]
    cdef Py_ssize_t m = y.shape[1]
    cdef Py_ssize_t j, i, k, r = 0
    cdef int sweep
    cdef double acc, nrm, scale = 0.0, thresh
    q_arr = np.zeros((ncol, m), dtype=np.float64)
    kept_arr = np.zeros(ncol, dtype=np.int64)
    cdef double[:, ::1] q = q_arr
    cdef long long[::1] kept = kept_arr
    cdef double[::1] v = np.empty(m, dtype=np.float64)
    with nogil:
        for j in range(ncol):
            acc = 0.0
            for k in range(m):
                acc = acc + w[k] * y[j, k] * y[j, k]
            if acc > scale:
                scale = acc
        scale = sqrt(scale)
        thresh = drop_tol * scale
        if scale > 0.0:
            for j in range(ncol):
                for k in range(m):
                    v[k] = y[j, k]
                for sweep in range(2):
                    for i in range(r):
                        acc = 0.0
                        for k in range(m):
                            acc = acc + w[k] * v[k] * q[i, k]
                        for k in range(m):
                            v[k] = v[k] - acc * q[i, k]
                nrm = 0.0
                for k in range(m):
                    nrm = nrm + w[k] * v[k] * v[k]
                nrm = sqrt(nrm)
                if nrm <= thresh or nrm == 0.0:
                    continue
                for k in range(m):
                    q[r, k] = v[k] / nrm
                kept[r] = j
                r = r + 1
    return q_arr[:r].copy(), kept_arr[:r].copy()
