"""Reference parabolic solver and ground-truth Green's functions.

The model problem is ``u_t - div(A(x, t) grad u) = f`` on ``(0,1)^n x (0,T]``
with zero initial data and zero Dirichlet boundary values. Space is
discretised with centred flux differences on a uniform grid and time with
Crank-Nicolson (trapezoidal in the forcing as well). The adjoint solver is the
exact transpose of the assembled forward map under the grid quadrature inner
product, so duality holds to round-off.

Fields are stored time-first, with shape ``(nt + 1, nx + 1, ..., nx + 1)``.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _kernels
from .errors import NumericalError, ResourceError, UsageError

DEFAULT_TABLE_BYTES = 1 << 30


# ---------------------------------------------------------------------------
# grid and fields
# ---------------------------------------------------------------------------

def _trapezoid(npts: int, step: float) -> np.ndarray:
    w = np.full(npts, step)
    w[0] = w[-1] = step / 2.0
    return w


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on ``[0,1]^n x [0,T]``.

    ``nx`` is the number of intervals per spatial axis and ``nt`` the number
    of time steps, so fields hold ``(nt + 1) * (nx + 1)**n`` values.
    """

    n: int
    nx: int
    nt: int
    T: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise UsageError("spatial dimension must be >= 1")
        if self.nx < 2 or self.nt < 1:
            raise UsageError("grid needs nx >= 2 and nt >= 1")
        if not self.T > 0:
            raise UsageError("final time must be positive")

    @property
    def h(self) -> float:
        return 1.0 / self.nx

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx + 1)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    @property
    def shape(self) -> tuple:
        return (self.nt + 1,) + (self.nx + 1,) * self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def space_weights(self) -> np.ndarray:
        """Trapezoid weights of one spatial axis."""
        return _trapezoid(self.nx + 1, self.h)

    @property
    def time_weights(self) -> np.ndarray:
        return _trapezoid(self.nt + 1, self.dt)

    def axis_weights(self) -> list:
        """Per-axis weights in storage order (time first)."""
        return [self.time_weights] + [self.space_weights] * self.n

    @property
    def weights(self) -> np.ndarray:
        """Tensor trapezoid weights with the field shape; they sum to ``T``."""
        w = self.time_weights
        for _ in range(self.n):
            w = np.multiply.outer(w, self.space_weights)
        return w

    def spatial_points(self) -> np.ndarray:
        """All spatial nodes as an ``(N, n)`` array (C order)."""
        mesh = np.meshgrid(*([self.x] * self.n), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interior_mask(self) -> np.ndarray:
        m = np.zeros((self.nx + 1,) * self.n, dtype=bool)
        m[(slice(1, -1),) * self.n] = True
        return m

    def index_range(self, lo: float, hi: float, axis: str) -> tuple[int, int]:
        """Inclusive node-index range covering ``[lo, hi]`` on ``axis``.

        ``lo``/``hi`` are fractions of the axis length; the range consists of
        the nodes lying inside the closed interval.
        """
        npts = self.nt if axis == "t" else self.nx
        a = int(np.ceil(lo * npts - 1e-9))
        b = int(np.floor(hi * npts + 1e-9))
        a, b = max(a, 0), min(b, npts)
        if a > b:
            raise UsageError(f"interval [{lo}, {hi}] contains no grid node on axis {axis}")
        return a, b

    def box_slices(self, box) -> tuple:
        """Node slices (time first) of the closed box ``box``.

        The box is expressed in unit-domain fractions; its time interval is
        scaled by ``T``.
        """
        a, b = self.index_range(box.t0, box.t1, "t")
        sl = [slice(a, b + 1)]
        for lo, hi in zip(box.lo, box.hi):
            c, d = self.index_range(lo, hi, "x")
            sl.append(slice(c, d + 1))
        return tuple(sl)

    def to_dict(self) -> dict:
        return {"n": self.n, "nx": self.nx, "nt": self.nt, "T": self.T}


@dataclass
class ScalarField:
    """Grid values of a forcing or a solution."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise UsageError(f"field shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("field contains non-finite values")

    def inner(self, other: "ScalarField") -> float:
        """Quadrature inner product."""
        return float(np.sum(self.grid.weights * self.values * other.values))

    def norm(self) -> float:
        return float(np.sqrt(self.inner(self)))


def as_field(values, grid: Grid) -> ScalarField:
    if isinstance(values, ScalarField):
        if values.grid != grid:
            raise UsageError("field lives on a different grid")
        return values
    return ScalarField(grid, values)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

class CoefficientField:
    """Symmetric diffusion tensor ``A(x, t)`` with ellipticity bounds.

    Parameters
    ----------
    func : callable
        ``func(points, t)`` with ``points`` of shape ``(P, n)`` returns either
        ``(P,)`` (isotropic ``a I``) or ``(P, n, n)`` values.
    n : int
        Spatial dimension.
    lam, Lam : float
        Lower and upper eigenvalue bounds.
    time_independent : bool
        Whether ``func`` ignores ``t``; enables a single factorisation.
    name : str
        Label recorded in provenance.
    """

    def __init__(self, func: Callable, n: int, lam: float, Lam: float,
                 time_independent: bool = False, name: str = "custom"):
        if not (0 < lam <= Lam):
            raise UsageError("need 0 < lam <= Lam")
        self.func = func
        self.n = int(n)
        self.lam = float(lam)
        self.Lam = float(Lam)
        self.time_independent = bool(time_independent)
        self.name = name

    def evaluate(self, points: np.ndarray, t: float) -> np.ndarray:
        """Tensor values with shape ``(P, n, n)``."""
        points = np.atleast_2d(points)
        v = np.asarray(self.func(points, t), dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None, None] * np.eye(self.n)[None]
        if v.shape != (points.shape[0], self.n, self.n):
            raise UsageError(f"coefficient returned shape {v.shape}")
        return v

    def check_bounds(self, grid: Grid, n_times: int = 5, tol: float = 1e-12) -> None:
        """Spot-check symmetry and ``lam <= eig(A) <= Lam`` on grid nodes."""
        pts = grid.spatial_points()
        for t in np.linspace(0.0, grid.T, n_times):
            a = self.evaluate(pts, t)
            if not np.allclose(a, np.swapaxes(a, 1, 2), atol=tol):
                raise UsageError("coefficient tensor is not symmetric")
            ev = np.linalg.eigvalsh(a)
            if ev.min() < self.lam - tol or ev.max() > self.Lam + tol:
                raise UsageError("coefficient eigenvalues violate [lam, Lam]")

    def describe(self) -> dict:
        return {"name": self.name, "n": self.n, "lam": self.lam, "Lam": self.Lam,
                "time_independent": self.time_independent}


def heat_coefficient(n: int = 1, scale: float = 1.0) -> CoefficientField:
    """``A = scale * I``; ``scale = 1`` gives the heat equation."""
    scale = float(scale)
    return CoefficientField(lambda p, t: np.full(p.shape[0], scale), n, scale, scale,
                            time_independent=True,
                            name="heat" if scale == 1.0 else f"heat*{scale:g}")


def coefficient_from_dict(spec: dict, n: int) -> CoefficientField:
    """Build a coefficient from a small JSON-style description.

    Supported kinds: ``{"kind": "heat"}``, ``{"kind": "constant", "value": a}``
    (isotropic) and ``{"kind": "table", "x": [...], "t": [...],
    "values": [[...]]}`` (isotropic, ``n = 1``, bilinear in ``(t, x)``).
    """
    kind = spec.get("kind")
    if kind == "heat":
        return heat_coefficient(n)
    if kind == "constant":
        return heat_coefficient(n, float(spec["value"]))
    if kind == "table":
        if n != 1:
            raise UsageError("tabulated coefficients are supported for n = 1 only")
        from scipy.interpolate import RegularGridInterpolator

        xs = np.asarray(spec["x"], dtype=float)
        ts = np.asarray(spec["t"], dtype=float)
        vals = np.asarray(spec["values"], dtype=float)
        if vals.shape != (ts.size, xs.size):
            raise UsageError("table values must have shape (len(t), len(x))")
        if vals.min() <= 0:
            raise UsageError("tabulated coefficient must be positive")
        interp = RegularGridInterpolator((ts, xs), vals, bounds_error=False, fill_value=None)

        def func(p, t):
            q = np.column_stack([np.full(p.shape[0], t), p[:, 0]])
            return interp(q)

        return CoefficientField(func, 1, float(vals.min()), float(vals.max()),
                                time_independent=ts.size == 1, name="table")
    raise UsageError(f"unknown coefficient kind {kind!r}")


def load_coefficient(path: str, n: int) -> CoefficientField:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise ResourceError(f"cannot read coefficient file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"coefficient file {path} is not valid JSON: {exc}") from exc
    return coefficient_from_dict(spec, n)


# ---------------------------------------------------------------------------
# spatial operator
# ---------------------------------------------------------------------------

def _face_coeff_1d(coeff: CoefficientField, grid: Grid, t: float) -> np.ndarray:
    faces = (grid.x[:-1] + grid.x[1:]) / 2.0
    return coeff.evaluate(faces[:, None], t)[:, 0, 0]


def _bands_1d(coeff: CoefficientField, grid: Grid, t: float):
    a = _face_coeff_1d(coeff, grid, t) / grid.h ** 2
    lo = a[:-1].copy()
    up = a[1:].copy()
    di = -(lo + up)
    lo[0] = 0.0
    up[-1] = 0.0
    return lo, di, up


def assemble_operator(coeff: CoefficientField, grid: Grid, t: float) -> sp.csr_matrix:
    """Sparse matrix of ``div(A grad .)`` on interior nodes at time ``t``.

    Diagonal tensor entries use face-centred fluxes; off-diagonal entries use
    centred differences of centred differences.
    """
    n, nx, h = grid.n, grid.nx, grid.h
    if n == 1:
        lo, di, up = _bands_1d(coeff, grid, t)
        return sp.diags([lo[1:], di, up[:-1]], [-1, 0, 1], format="csr")
    shape = (nx + 1,) * n
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    interior = idx[(slice(1, -1),) * n].ravel()
    pos = -np.ones(idx.size, dtype=np.int64)
    pos[interior] = np.arange(interior.size)
    nodes = np.array(np.unravel_index(interior, shape)).T
    rows, cols, vals = [], [], []

    def add(target_nodes, coef):
        lin = np.ravel_multi_index(target_nodes.T, shape)
        p = pos[lin]
        keep = p >= 0
        rows.append(np.arange(interior.size)[keep])
        cols.append(p[keep])
        vals.append(coef[keep])

    for a in range(n):
        e = np.zeros(n, dtype=np.int64)
        e[a] = 1
        fp = (nodes + 0.5 * e) * h
        fm = (nodes - 0.5 * e) * h
        ap = coeff.evaluate(fp, t)[:, a, a] / h ** 2
        am = coeff.evaluate(fm, t)[:, a, a] / h ** 2
        add(nodes + e, ap)
        add(nodes - e, am)
        add(nodes, -(ap + am))
        for b in range(n):
            if b == a:
                continue
            f = np.zeros(n, dtype=np.int64)
            f[b] = 1
            cp = coeff.evaluate(np.clip((nodes + e) * h, 0, 1), t)[:, a, b] / (4 * h ** 2)
            cm = coeff.evaluate(np.clip((nodes - e) * h, 0, 1), t)[:, a, b] / (4 * h ** 2)
            add(nodes + e + f, cp)
            add(nodes + e - f, -cp)
            add(nodes - e + f, -cm)
            add(nodes - e - f, cm)
    m = interior.size
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m, m))


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def positive_substeps(coeff: CoefficientField, grid: Grid) -> int:
    """Smallest sub-step count with ``dt_sub <= h**2 / (n * Lam)``.

    With this step the Crank-Nicolson explicit half has a nonnegative matrix,
    so nonnegative forcing yields a nonnegative solution (for diagonal ``A``).
    """
    return max(1, int(np.ceil(grid.n * coeff.Lam * grid.dt / grid.h ** 2 - 1e-12)))


class ParabolicSolver:
    """Batched Crank-Nicolson forward and adjoint solves on a fixed grid.

    The forward map sends a forcing ``f`` (all grid nodes and time levels) to
    the discrete solution ``u``; the adjoint is ``W^{-1} F^T W`` with ``W`` the
    quadrature weights. Both accept several columns at once and time windows,
    which give exactly the restriction of a full solve (forcing that starts
    at level ``l0`` leaves the solution zero before ``l0``).

    Parameters
    ----------
    coeff : CoefficientField
    grid : Grid
    substeps : int, optional
        Crank-Nicolson sub-steps per grid time step, with the forcing
        interpolated linearly in time between grid levels. Values with
        ``dt / substeps <= h**2 / (n * Lam)`` make the scheme
        positivity-preserving (see :func:`positive_substeps`).
    backend : {"compiled", "python"}, optional
        Kernel implementation; defaults to the one selected at import.

    Attributes
    ----------
    counts : dict
        Number of forward and adjoint columns solved so far.
    """

    def __init__(self, coeff: CoefficientField, grid: Grid, substeps: int = 1,
                 backend: str | None = None):
        if coeff.n != grid.n:
            raise UsageError("coefficient and grid dimensions differ")
        if int(substeps) < 1:
            raise UsageError("substeps must be >= 1")
        self.coeff = coeff
        self.grid = grid
        self.substeps = int(substeps)
        self.backend = _kernels.BACKEND if backend is None else backend
        self.kern = _kernels.get_backend(self.backend)
        self._lock = threading.Lock()
        self.counts = {"forward": 0, "adjoint": 0}
        self._index_cache = {}
        dts = grid.dt / self.substeps
        self.hd = dts / 2.0
        n, nx = grid.n, grid.nx
        self.n_int = (nx - 1) ** n
        self.space_shape = (nx + 1,) * n
        self.int_shape = (nx - 1,) * n
        n_fine = grid.nt * self.substeps
        steps = [0.0] if coeff.time_independent else list((np.arange(n_fine) + 0.5) * dts)
        hd = self.hd
        if n == 1:
            bands = [_bands_1d(coeff, grid, t) for t in steps]
            lo = np.array([b[0] for b in bands])
            di = np.array([b[1] for b in bands])
            up = np.array([b[2] for b in bands])
            self.P = (np.ascontiguousarray(-hd * lo), np.ascontiguousarray(1.0 - hd * di),
                      np.ascontiguousarray(-hd * up))
            self.Q = (np.ascontiguousarray(hd * lo), np.ascontiguousarray(1.0 + hd * di),
                      np.ascontiguousarray(hd * up))
            self.PT = self._transpose_bands(self.P)
            self.QT = self._transpose_bands(self.Q)
        else:
            eye = sp.identity(self.n_int, format="csc")
            Lmats = [assemble_operator(coeff, grid, t).tocsc() for t in steps]
            self.Qmats = [(eye + hd * L).tocsr() for L in Lmats]
            self.QTmats = [Q.T.tocsr() for Q in self.Qmats]
            self.lus = [splu((eye - hd * L).tocsc()) for L in Lmats]
        wx = grid.space_weights[1:-1]
        w = wx
        for _ in range(n - 1):
            w = np.multiply.outer(w, wx)
        self.w_int_space = w.ravel()

    @staticmethod
    def _transpose_bands(B):
        lo, di, up = B
        lt = np.zeros_like(lo)
        ut = np.zeros_like(up)
        lt[:, 1:] = up[:, :-1]
        ut[:, :-1] = lo[:, 1:]
        return (np.ascontiguousarray(lt), di, np.ascontiguousarray(ut))

    def _step_rows(self, m0: int, m1: int, bands):
        if bands[0].shape[0] == 1:
            return bands
        return tuple(np.ascontiguousarray(b[m0:m1]) for b in bands)

    # -- low level sweeps on interior unknowns ------------------------------

    def _refine(self, f: np.ndarray) -> np.ndarray:
        """Linear interpolation in time onto the sub-step levels."""
        q = self.substeps
        if q == 1:
            return f
        S = f.shape[0] - 1
        theta = (np.arange(q) / q)[None, :, None, None]
        fine = (1.0 - theta) * f[:-1, None] + theta * f[1:, None]
        fine = fine.reshape((S * q,) + f.shape[1:])
        return np.concatenate([fine, f[-1:]], axis=0)

    def _coarsen_transpose(self, v: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`_refine`."""
        q = self.substeps
        if q == 1:
            return v
        S = (v.shape[0] - 1) // q
        theta = (np.arange(q) / q)[None, :, None, None]
        body = v[:-1].reshape((S, q) + v.shape[1:])
        out = np.zeros((S + 1,) + v.shape[1:])
        out[:-1] += np.sum((1.0 - theta) * body, axis=1)
        out[1:] += np.sum(theta * body, axis=1)
        out[-1] += v[-1]
        return out

    def _sweep_forward(self, f: np.ndarray, m0: int) -> np.ndarray:
        """``f``: (S+1, n_int, C) forcing at levels ``m0..m0+S``; zero state at ``m0``."""
        q = self.substeps
        ff = self._refine(f)
        u = self._fine_forward(ff, m0 * q)
        return np.ascontiguousarray(u[::q]) if q > 1 else u

    def _sweep_adjoint(self, z: np.ndarray, m0: int) -> np.ndarray:
        """Euclidean transpose of :meth:`_sweep_forward`."""
        q = self.substeps
        if q == 1:
            return self._fine_adjoint(z, m0)
        zf = np.zeros(((z.shape[0] - 1) * q + 1,) + z.shape[1:])
        zf[::q] = z
        return self._coarsen_transpose(self._fine_adjoint(zf, m0 * q))

    def _fine_forward(self, f: np.ndarray, m0: int) -> np.ndarray:
        S = f.shape[0] - 1
        f = np.ascontiguousarray(f)
        out = np.zeros_like(f)
        if self.grid.n == 1:
            P = self._step_rows(m0, m0 + S, self.P)
            Q = self._step_rows(m0, m0 + S, self.Q)
            self.kern.cn_forward_tridiag(*P, *Q, f, self.hd, out)
        else:
            ti = self.coeff.time_independent
            for s in range(S):
                k = 0 if ti else m0 + s
                rhs = self.Qmats[k] @ out[s] + self.hd * (f[s] + f[s + 1])
                out[s + 1] = self.lus[k].solve(rhs)
        return out

    def _fine_adjoint(self, z: np.ndarray, m0: int) -> np.ndarray:
        S = z.shape[0] - 1
        z = np.ascontiguousarray(z)
        out = np.zeros_like(z)
        if self.grid.n == 1:
            P = self._step_rows(m0, m0 + S, self.PT)
            Q = self._step_rows(m0, m0 + S, self.QT)
            self.kern.cn_adjoint_tridiag(*P, *Q, z, self.hd, out)
        else:
            ti = self.coeff.time_independent
            lam = z[S].copy()
            for s in range(S - 1, -1, -1):
                k = 0 if ti else m0 + s
                a = self.lus[k].solve(lam, trans="T")
                out[s + 1] += self.hd * a
                out[s] += self.hd * a
                lam = self.QTmats[k] @ a + z[s]
        return out

    def _count(self, kind: str, ncol: int):
        with self._lock:
            self.counts[kind] += int(ncol)

    # -- windowed application ------------------------------------------------

    def _interior_index(self, space_slices: Sequence[slice]):
        """Positions of the window's interior nodes inside the interior vector,
        and their positions inside the window."""
        key = tuple((s.start, s.stop) for s in space_slices)
        hit = self._index_cache.get(key)
        if hit is not None:
            return hit
        nx = self.grid.nx
        ranges = [np.arange(s.start, s.stop) for s in space_slices]
        mesh = np.meshgrid(*ranges, indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        inside = np.all((coords >= 1) & (coords <= nx - 1), axis=1)
        int_pos = np.ravel_multi_index((coords[inside] - 1).T, self.int_shape) \
            if self.grid.n > 1 else coords[inside, 0] - 1
        win_pos = np.nonzero(inside)[0]
        if len(self._index_cache) < 65536:
            self._index_cache[key] = (int_pos, win_pos)
        return int_pos, win_pos

    def apply_forward(self, f_win: np.ndarray, src: tuple, dst: tuple) -> np.ndarray:
        """Forward solves for forcings supported in a window.

        Parameters
        ----------
        f_win : ndarray, shape ``(Tf, *Sf, C)``
            Forcing values on the source window (time first, columns last).
        src, dst : tuple of slices
            Node slices (time first) of the source and output windows.

        Returns
        -------
        ndarray, shape ``(To, *So, C)``
            Solution restricted to the output window.
        """
        ncol = f_win.shape[-1]
        self._count("forward", ncol)
        return self._forward_window(f_win, src, dst)

    def _forward_window(self, f_win, src, dst):
        ncol = f_win.shape[-1]
        l0, l1 = src[0].start, src[0].stop - 1
        a, b = dst[0].start, dst[0].stop - 1
        out_shape = (b - a + 1,) + tuple(s.stop - s.start for s in dst[1:]) + (ncol,)
        result = np.zeros(out_shape)
        if b < l0 or ncol == 0:
            return result
        m0 = max(l0 - 1, 0)
        S = b - m0
        f = np.zeros((S + 1, self.n_int, ncol))
        ip, wp = self._interior_index(src[1:])
        fw = f_win.reshape(f_win.shape[0], -1, ncol)
        last = min(l1, b)
        f[l0 - m0:last - m0 + 1, ip, :] = fw[:last - l0 + 1, wp, :]
        u = self._sweep_forward(f, m0)
        if not np.all(np.isfinite(u)):
            raise NumericalError("non-finite values in forward solve")
        op, owp = self._interior_index(dst[1:])
        res = result.reshape(result.shape[0], -1, ncol)
        lo_lvl = max(a, m0)
        res[lo_lvl - a:, owp, :] = u[lo_lvl - m0:, op, :]
        return result

    def apply_adjoint(self, g_win: np.ndarray, src: tuple, dst: tuple,
                      count: bool = True) -> np.ndarray:
        """Adjoint solves ``W^{-1} F^T W g`` for ``g`` supported on a window.

        ``src`` is the window carrying ``g`` and ``dst`` the window on which the
        result is returned. Shapes follow :meth:`apply_forward`.
        """
        ncol = g_win.shape[-1]
        if count:
            self._count("adjoint", ncol)
        a, b = src[0].start, src[0].stop - 1
        l0, l1 = dst[0].start, dst[0].stop - 1
        out_shape = (l1 - l0 + 1,) + tuple(s.stop - s.start for s in dst[1:]) + (ncol,)
        result = np.zeros(out_shape)
        if b < l0 or ncol == 0 or b == 0:
            return result
        m0 = max(l0 - 1, 0)
        S = b - m0
        wt = self.grid.time_weights
        z = np.zeros((S + 1, self.n_int, ncol))
        ip, wp = self._interior_index(src[1:])
        gw = g_win.reshape(g_win.shape[0], -1, ncol)
        first = max(a, m0)
        lv = np.arange(first, b + 1)
        z[first - m0:, ip, :] = (gw[first - a:, wp, :]
                                 * wt[lv][:, None, None]
                                 * self.w_int_space[ip][None, :, None])
        v = self._sweep_adjoint(z, m0)
        if not np.all(np.isfinite(v)):
            raise NumericalError("non-finite values in adjoint solve")
        op, owp = self._interior_index(dst[1:])
        res = result.reshape(result.shape[0], -1, ncol)
        top = min(l1, b)
        lv = np.arange(l0, top + 1)
        res[:top - l0 + 1, owp, :] = (v[l0 - m0:top - m0 + 1, op, :]
                                      / wt[lv][:, None, None]
                                      / self.w_int_space[op][None, :, None])
        return result

    # -- full-field convenience ---------------------------------------------

    def full_window(self) -> tuple:
        return (slice(0, self.grid.nt + 1),) + tuple(
            slice(0, self.grid.nx + 1) for _ in range(self.grid.n))

    def forward(self, f: np.ndarray) -> np.ndarray:
        """Forward solve of one field (grid shape) or a stack (grid shape + (C,))."""
        single = f.ndim == self.grid.n + 1
        fc = f[..., None] if single else f
        w = self.full_window()
        u = self.apply_forward(np.asarray(fc, dtype=float), w, w)
        return u[..., 0] if single else u

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        single = g.ndim == self.grid.n + 1
        gc = g[..., None] if single else g
        w = self.full_window()
        v = self.apply_adjoint(np.asarray(gc, dtype=float), w, w)
        return v[..., 0] if single else v


def solve_forward(coeff: CoefficientField, f, grid: Grid,
                  solver: ParabolicSolver | None = None) -> ScalarField:
    """Discrete solution of ``u_t - div(A grad u) = f`` with zero data."""
    f = as_field(f, grid)
    solver = solver or ParabolicSolver(coeff, grid)
    return ScalarField(grid, solver.forward(f.values))


def solve_adjoint(coeff: CoefficientField, g, grid: Grid,
                  solver: ParabolicSolver | None = None) -> ScalarField:
    """Exact quadrature adjoint of :func:`solve_forward` (zero terminal data)."""
    g = as_field(g, grid)
    solver = solver or ParabolicSolver(coeff, grid)
    return ScalarField(grid, solver.adjoint(g.values))


# ---------------------------------------------------------------------------
# analytic heat kernel
# ---------------------------------------------------------------------------

def greens_exact_heat(x, t, y, s, n_terms: int = 200):
    """Dirichlet heat kernel on (0,1) by eigenfunction expansion.

    ``Theta(t - s) * sum_k 2 sin(k pi x) sin(k pi y) exp(-k^2 pi^2 (t - s))``
    truncated after ``n_terms`` terms; zero whenever ``t <= s``.
    """
    if n_terms < 1:
        raise UsageError("n_terms must be >= 1")
    x, t, y, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, t, y, s)))
    tau = t - s
    pos = tau > 0
    out = np.zeros(x.shape)
    if np.any(pos):
        k = np.arange(1, n_terms + 1, dtype=float)
        xp, yp, tp = x[pos][..., None], y[pos][..., None], tau[pos][..., None]
        terms = 2.0 * np.sin(k * np.pi * xp) * np.sin(k * np.pi * yp) * np.exp(-(k * np.pi) ** 2 * tp)
        out[pos] = terms.sum(axis=-1)
    return out if out.ndim else float(out)


def free_space_heat(x, t, y, s, n: int = 1):
    """Whole-space heat kernel ``Theta / (4 pi tau)^(n/2) exp(-|x-y|^2 / (4 tau))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    tau = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
    r2 = (x - y) ** 2 if n == 1 else np.sum((x - y) ** 2, axis=-1)
    safe = np.where(tau > 0, tau, 1.0)
    val = np.exp(-r2 / (4 * safe)) / (4 * np.pi * safe) ** (n / 2)
    return np.where(tau > 0, val, 0.0)


_SERIES_SWITCH = 0.02


def dirichlet_heat_1d(x, y, tau):
    """1-D Dirichlet heat kernel for ``tau > 0`` (broadcasting).

    Uses the eigenfunction series for ``tau >= 0.02`` and the method of images
    below, both converged to double precision.
    """
    x, y, tau = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, tau)))
    out = np.zeros(x.shape)
    big = tau >= _SERIES_SWITCH
    if np.any(big):
        k = np.arange(1, 41, dtype=float)
        terms = (2.0 * np.sin(k * np.pi * x[big][..., None]) * np.sin(k * np.pi * y[big][..., None])
                 * np.exp(-(k * np.pi) ** 2 * tau[big][..., None]))
        out[big] = terms.sum(axis=-1)
    small = (~big) & (tau > 0)
    if np.any(small):
        xs, ys, ts = x[small], y[small], tau[small]
        acc = np.zeros(xs.shape)
        for m in range(-2, 3):
            acc += np.exp(-(xs - ys + 2 * m) ** 2 / (4 * ts)) - np.exp(-(xs + ys + 2 * m) ** 2 / (4 * ts))
        out[small] = acc / np.sqrt(4 * np.pi * ts)
    return out


def _h2(tau, mu):
    """Second antiderivative of ``Theta(tau) exp(-mu tau)`` vanishing at 0."""
    tau = np.maximum(tau, 0.0)
    z = mu * tau
    small = z < 1e-3
    val = np.where(small, tau ** 2 * (0.5 - z / 6.0 + z ** 2 / 24.0 - z ** 3 / 120.0),
                   (z + np.expm1(-np.where(small, 1.0, z))) / np.where(mu > 0, mu, 1.0) ** 2)
    return val


class HeatSeriesOracle:
    """Analytic Green's function of the heat equation on ``(0,1)^n``.

    The kernel factorises over spatial axes; each factor is evaluated by
    :func:`dirichlet_heat_1d`. Exact box integrals are available through
    :meth:`box_integral`.
    """

    name = "heat-series"
    time_invariant = True

    def __init__(self, n: int = 1, T: float = 1.0, n_terms: int = 2000):
        self.n = n
        self.T = T
        self.n_terms = n_terms

    def __call__(self, x, t, y, s):
        """Kernel at points; ``x``/``y`` shaped ``(..., n)`` (or ``(...)`` for n=1)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        tau = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
        if self.n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
            y = y[..., None]
        val = np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1], tau.shape))
        for a in range(self.n):
            val = val * dirichlet_heat_1d(x[..., a], y[..., a], tau)
        return np.where(tau > 0, val, 0.0)

    def block(self, xs: Sequence[np.ndarray], ts: np.ndarray,
              ys: Sequence[np.ndarray], ss: np.ndarray) -> np.ndarray:
        """Kernel on a tensor block, shape ``(len(ts), *lens(xs), len(ss), *lens(ys))``."""
        n = self.n
        nd = 2 + 2 * n
        def place(v, pos):
            shape = [1] * nd
            shape[pos] = len(v)
            return np.asarray(v, dtype=float).reshape(shape)
        tau = place(ts, 0) - place(ss, 1 + n)
        val = np.ones(1)
        for a in range(n):
            val = val * dirichlet_heat_1d(place(xs[a], 1 + a), place(ys[a], 2 + n + a), tau)
        return np.where(tau > 0, val, 0.0)

    def box_integral(self, xlo, xhi, t0, t1, ylo, yhi, s0, s1) -> np.ndarray:
        """Exact integral of the kernel over box pairs (vectorised over rows).

        Spatial bounds have shape ``(m, n)``, time bounds ``(m,)``. Uses the
        eigenfunction series, whose box integrals converge like ``k^-4``.
        """
        xlo, xhi, ylo, yhi = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (xlo, xhi, ylo, yhi))
        t0, t1, s0, s1 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (t0, t1, s0, s1))
        m = t0.shape[0]
        K = self.n_terms if self.n == 1 else max(40, int(round(self.n_terms ** (1.0 / self.n))))
        k = np.arange(1, K + 1, dtype=float)
        kp = k * np.pi
        # per-axis spatial factors  2 * int_X sin * int_Y sin : (m, n, K)
        sx = (np.cos(kp * xlo[..., None]) - np.cos(kp * xhi[..., None])) / kp
        sy = (np.cos(kp * ylo[..., None]) - np.cos(kp * yhi[..., None])) / kp
        fac = 2.0 * sx * sy
        out = np.zeros(m)
        chunk = max(1, 2_000_000 // (K ** self.n))
        for start in range(0, m, chunk):
            sl = slice(start, start + chunk)
            if self.n == 1:
                mu = kp ** 2
                E = self._time_factor(t0[sl], t1[sl], s0[sl], s1[sl], mu[None, :])
                out[sl] = np.sum(fac[sl, 0, :] * E, axis=1)
            else:
                grids = np.meshgrid(*([k] * self.n), indexing="ij")
                mu = (np.pi ** 2) * sum(g ** 2 for g in grids).ravel()
                prod = fac[sl, 0, :]
                for a in range(1, self.n):
                    prod = (prod[:, :, None] * fac[sl, a, None, :]).reshape(prod.shape[0], -1)
                E = self._time_factor(t0[sl], t1[sl], s0[sl], s1[sl], mu[None, :])
                out[sl] = np.sum(prod * E, axis=1)
        return out

    @staticmethod
    def _time_factor(t0, t1, s0, s1, mu):
        t0, t1, s0, s1 = (v[:, None] for v in (t0, t1, s0, s1))
        return _h2(t1 - s0, mu) - _h2(t1 - s1, mu) - _h2(t0 - s0, mu) + _h2(t0 - s1, mu)

    def describe(self) -> dict:
        return {"oracle": self.name, "n": self.n}


# ---------------------------------------------------------------------------
# discrete ground truth
# ---------------------------------------------------------------------------

class DiscreteKernelTable:
    """Green's function of the discrete solver, ``G = F[:, j] / w_j``.

    Each column is the response to a Kronecker spike scaled by the inverse
    quadrature weight (node volume times time step). For time-independent
    coefficients the responses to spikes at interior time levels are shifts
    of one another, so only two families of solves are stored; otherwise all
    columns are computed. Entries with ``t <= s`` are zero by construction.

    By default the table is built with :func:`positive_substeps` sub-steps,
    which removes the slowly damped sign-alternating modes that a point
    source excites in plain Crank-Nicolson; pass ``substeps=1`` (or the
    learner's solver) for the exact kernel of that solver.

    A spike at ``s = 0`` only sees half a time step of forcing, so its
    response is centred near ``dt / 3`` rather than at ``0``. Unless
    ``exact`` is set, a time-invariant table therefore takes the ``s = 0``
    column from the interior response via ``G(x, t; y, 0) = G(x, t + dt; y, dt)``.
    """

    name = "discrete"

    def __init__(self, coeff: CoefficientField, grid: Grid,
                 max_bytes: int = DEFAULT_TABLE_BYTES, substeps="auto",
                 solver: ParabolicSolver | None = None, exact: bool = False):
        self.coeff = coeff
        self.exact = bool(exact)
        self.grid = grid
        n_space = (grid.nx + 1) ** grid.n
        self.time_invariant = coeff.time_independent
        if self.time_invariant:
            need = 2 * (grid.nt + 1) * n_space * n_space * 8
        else:
            need = ((grid.nt + 1) * n_space) ** 2 * 8
        if need > max_bytes:
            raise ResourceError(
                f"ground-truth table needs {need} bytes, above the cap of {max_bytes}")
        if solver is None:
            q = positive_substeps(coeff, grid) if substeps == "auto" else int(substeps)
            solver = ParabolicSolver(coeff, grid, substeps=q)
        self.solver = solver
        self.substeps = solver.substeps
        self._build()

    def _spike_response(self, level: int, solver: ParabolicSolver) -> np.ndarray:
        """Responses to scaled spikes at ``level``, shape ``(levels, n_space, n_space)``."""
        g = solver.grid
        n_space = (g.nx + 1) ** g.n
        ints = np.nonzero(g.interior_mask().ravel())[0]
        wsp = g.weights[0].ravel() / g.time_weights[0]
        fine_levels = g.nt * solver.substeps + 1
        chunk = max(1, int(4e7 // (fine_levels * solver.n_int * 3)))
        out = np.zeros((g.nt + 1, n_space, n_space))
        full = solver.full_window()
        src_t = slice(level, level + 1)
        for c0 in range(0, ints.size, chunk):
            cols = ints[c0:c0 + chunk]
            f = np.zeros((1, n_space, cols.size))
            f[0, cols, np.arange(cols.size)] = 1.0 / (wsp[cols] * g.time_weights[level])
            f = f.reshape((1,) + g.shape[1:] + (cols.size,))
            r = solver._forward_window(f, (src_t,) + full[1:], full)
            out[:, :, cols] = r.reshape(g.nt + 1, n_space, cols.size)
        return out

    def _build(self):
        g = self.grid
        n_space = (g.nx + 1) ** g.n
        if self.time_invariant:
            # spikes at interior levels are time shifts of the level-1 response
            if self.exact:
                self.r1 = self._spike_response(1, self.solver)
                self.r0 = self._spike_response(0, self.solver)
            else:
                # one extra step so that the s = 0 column can be read off by shifting
                ext = Grid(g.n, g.nx, g.nt + 1, g.T + g.dt)
                ext_solver = ParabolicSolver(self.coeff, ext, substeps=self.substeps,
                                             backend=self.solver.backend)
                self.r1 = self._spike_response(1, ext_solver)
                self.r0 = None
        else:
            table = np.zeros((g.nt + 1, n_space, g.nt + 1, n_space))
            for lvl in range(g.nt + 1):
                table[:, :, lvl, :] = self._spike_response(lvl, self.solver)
            self.table = table

    def entries(self, j: np.ndarray, i: np.ndarray, l: np.ndarray, k: np.ndarray) -> np.ndarray:
        """Values at time levels ``j``/``l`` and flat spatial indices ``i``/``k``."""
        j, i, l, k = np.broadcast_arrays(*(np.asarray(v, dtype=np.int64) for v in (j, i, l, k)))
        out = np.zeros(j.shape)
        valid = j > l
        if self.time_invariant:
            wt = self.grid.time_weights
            z = valid & (l == 0)
            if self.r0 is not None:
                out[z] = self.r0[j[z], i[z], k[z]]
            else:
                out[z] = self.r1[(j + 1)[z], i[z], k[z]]
            o = valid & (l > 0)
            out[o] = self.r1[(j - l + 1)[o], i[o], k[o]] * (wt[1] / wt[l[o]])
        else:
            out[valid] = self.table[j[valid], i[valid], l[valid], k[valid]]
        return out

    def block(self, dst: tuple, src: tuple) -> np.ndarray:
        """Table restricted to node windows, shape ``(To, *So, Ts, *Ss)``."""
        g = self.grid
        shp = (g.nx + 1,) * g.n
        def flat(slices):
            rng = [np.arange(s.start, s.stop) for s in slices]
            mesh = np.meshgrid(*rng, indexing="ij")
            return np.ravel_multi_index(tuple(m.ravel() for m in mesh), shp), tuple(len(r) for r in rng)
        ix, xs = flat(dst[1:])
        iy, ys = flat(src[1:])
        jt = np.arange(dst[0].start, dst[0].stop)
        ls = np.arange(src[0].start, src[0].stop)
        vals = self.entries(jt[:, None, None, None], ix[None, :, None, None],
                            ls[None, None, :, None], iy[None, None, None, :])
        return vals.reshape((len(jt),) + xs + (len(ls),) + ys)

    def dense(self) -> np.ndarray:
        """Full table with shape ``grid.shape + grid.shape``."""
        g = self.grid
        full = tuple([slice(0, g.nt + 1)] + [slice(0, g.nx + 1)] * g.n)
        return self.block(full, full)


TABLE_MAGIC = b"PGREENGT"


def save_kernel_table(table: DiscreteKernelTable, path) -> None:
    """Write a kernel table as a JSON header followed by raw little-endian arrays.

    Layout: 8-byte magic, 8-byte header length, UTF-8 JSON header (shape,
    axes, dtype and endianness of every array, grid and coefficient), then
    the arrays in header order.
    """
    if table.time_invariant:
        arrays = [("r1", table.r1, ["lag+1", "x", "y"])]
        if table.r0 is not None:
            arrays.append(("r0", table.r0, ["t", "x", "y"]))
    else:
        arrays = [("table", table.table, ["t", "x", "s", "y"])]
    header = {
        "grid": table.grid.to_dict(), "coefficient": table.coeff.describe(),
        "substeps": table.substeps, "exact": table.exact,
        "time_invariant": table.time_invariant,
        "arrays": [{"name": nm, "shape": list(a.shape), "axes": ax, "dtype": "<f8",
                    "endianness": "little"} for nm, a, ax in arrays],
    }
    hb = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(TABLE_MAGIC + len(hb).to_bytes(8, "little") + hb)
            for _, a, _ in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    except OSError as exc:
        raise ResourceError(f"cannot write table file {path}: {exc}") from exc


def load_kernel_table(path) -> DiscreteKernelTable:
    """Read a table written by :func:`save_kernel_table`."""
    from .errors import ModelFormatError, TruncatedFileError

    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ResourceError(f"cannot read table file {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != TABLE_MAGIC:
        raise ModelFormatError(f"{path} is not a kernel table file")
    hl = int.from_bytes(data[8:16], "little")
    try:
        header = json.loads(data[16:16 + hl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable table header: {exc}") from exc
    off = 16 + hl
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        if off + 8 * count > len(data):
            raise TruncatedFileError(f"table file {path} is truncated")
        arrays[spec["name"]] = np.frombuffer(data, "<f8", count, off).reshape(spec["shape"]).astype(float)
        off += 8 * count
    if off != len(data):
        raise ModelFormatError("table file has trailing bytes")
    g = header["grid"]
    c = header["coefficient"]
    tab = DiscreteKernelTable.__new__(DiscreteKernelTable)
    tab.grid = Grid(g["n"], g["nx"], g["nt"], g["T"])
    # only the description survives; the table itself is the oracle
    tab.coeff = CoefficientField(lambda p, t: np.ones(p.shape[0]), c["n"], c["lam"], c["Lam"],
                                 c["time_independent"], c["name"])
    tab.exact = bool(header["exact"])
    tab.substeps = int(header["substeps"])
    tab.solver = None
    tab.time_invariant = bool(header["time_invariant"])
    if tab.time_invariant:
        tab.r1 = arrays["r1"]
        tab.r0 = arrays.get("r0")
    else:
        tab.table = arrays["table"]
    return tab


def greens_discrete_ground_truth(coeff: CoefficientField, grid: Grid,
                                 max_bytes: int = DEFAULT_TABLE_BYTES,
                                 substeps="auto") -> DiscreteKernelTable:
    """Kernel table of the discrete solution operator (see :class:`DiscreteKernelTable`)."""
    return DiscreteKernelTable(coeff, grid, max_bytes=max_bytes, substeps=substeps)
