"""Gaussian-process forcings and the covariance-quality factor.

Forcings are drawn from a Karhunen-Loeve expansion of a covariance kernel
on the space-time grid. The default kernel is the squared exponential in the
metric-scaled coordinates ``(x, t / sqrt(beta))``; it is separable, so the
weighted eigenproblem is solved per axis and the leading products of the
axis modes are kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._blocks import weighted_svd, window_axis_weights, window_weights
from .errors import UsageError
from .solver import Grid, ScalarField

SQUARED_EXPONENTIAL = "squared_exponential"
USER_MATRIX = "matrix"


# ---------------------------------------------------------------------------
# kernels and their spectra
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovarianceKernel:
    """Covariance kernel on the space-time domain.

    Parameters
    ----------
    kind : {"squared_exponential", "matrix"}
    length_scale : float
        ``l`` in ``variance * exp(-d^2 / (2 l^2))``, with
        ``d^2 = |x - x'|^2 + (t - t')^2 / beta``.
    beta : float
        Time scaling of the parabolic metric.
    variance : float
        Overall scale; zero gives the zero kernel.
    matrix : ndarray, optional
        Kernel values on all grid nodes (C order of the field shape) for
        ``kind="matrix"``.
    """

    kind: str = SQUARED_EXPONENTIAL
    length_scale: float = 0.2
    beta: float = 1.0
    variance: float = 1.0
    matrix: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == SQUARED_EXPONENTIAL:
            if not self.length_scale > 0 or not self.beta > 0:
                raise UsageError("length_scale and beta must be positive")
            if self.variance < 0:
                raise UsageError("variance must be nonnegative")
        elif self.kind == USER_MATRIX:
            if self.matrix is None:
                raise UsageError("matrix kernel needs a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise UsageError("kernel matrix must be square")
            if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                raise UsageError("kernel matrix is not symmetric")
            object.__setattr__(self, "matrix", m)
        else:
            raise UsageError(f"unknown kernel kind {self.kind!r}")

    def axis_kernel(self, a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
        """One-dimensional factor; ``axis = 0`` is time."""
        scale = self.length_scale ** 2 * (self.beta if axis == 0 else 1.0)
        return np.exp(-(a[:, None] - b[None, :]) ** 2 / (2.0 * scale))

    def __call__(self, z: np.ndarray, zp: np.ndarray) -> np.ndarray:
        """Kernel between point sets ``(P, 1 + n)`` and ``(Q, 1 + n)`` (time first)."""
        if self.kind != SQUARED_EXPONENTIAL:
            raise UsageError("pointwise evaluation needs an analytic kernel")
        z = np.atleast_2d(z)
        zp = np.atleast_2d(zp)
        out = np.full((z.shape[0], zp.shape[0]), self.variance)
        for a in range(z.shape[1]):
            out = out * self.axis_kernel(z[:, a], zp[:, a], a)
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "length_scale": self.length_scale,
                "beta": self.beta, "variance": self.variance}


def _weighted_eigh(kmat: np.ndarray, w: np.ndarray):
    """Eigenpairs of ``K`` in ``L2(w)``: ``sum_j K_ij w_j psi_j = lam psi_i``."""
    sw = np.sqrt(w)
    b = sw[:, None] * kmat * sw[None, :]
    b = (b + b.T) / 2.0
    lam, vec = np.linalg.eigh(b)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order]
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(sw[:, None] > 0, vec / np.where(sw > 0, sw, 1.0)[:, None], 0.0)
    return lam, psi


@dataclass(frozen=True)
class SpectralDecomposition:
    """Truncated Karhunen-Loeve expansion on a grid.

    For separable kernels the modes are products of per-axis modes:
    ``psi_j = prod_a axis_modes[a][:, index[j, a]]``; for dense kernels the
    modes are stored directly.

    Attributes
    ----------
    eigenvalues : ndarray
        Kept eigenvalues in non-increasing order.
    trace : float
        Sum of all eigenvalues (kept or not), equal to the quadrature of
        ``K(z, z)``.
    """

    grid: Grid
    eigenvalues: np.ndarray
    trace: float
    axis_modes: tuple | None = None
    index: np.ndarray | None = None
    dense_modes: np.ndarray | None = None
    kernel: CovarianceKernel | None = None

    @property
    def k(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def kept_trace(self) -> float:
        return float(np.sum(self.eigenvalues))

    def window_modes(self, slices=None) -> np.ndarray:
        """Mode values on a node window, shape ``(k, *window_shape)``."""
        g = self.grid
        if slices is None:
            slices = tuple([slice(0, g.nt + 1)] + [slice(0, g.nx + 1)] * g.n)
        if self.dense_modes is not None:
            full = self.dense_modes.reshape((self.k,) + g.shape)
            return full[(slice(None),) + tuple(slices)]
        out = None
        for a, sl in enumerate(slices):
            m = self.axis_modes[a][sl][:, self.index[:, a]].T  # (k, len)
            if out is None:
                out = m
            else:
                out = out[..., None] * m.reshape((m.shape[0],) + (1,) * (out.ndim - 1) + (m.shape[1],))
        return out

    @property
    def fields(self) -> np.ndarray:
        """All eigenfields on the full grid, shape ``(k, *grid.shape)``."""
        return self.window_modes()


def spectral_decompose(kernel: CovarianceKernel, grid: Grid, k_max: int = 200) -> SpectralDecomposition:
    """Weighted symmetric eigendecomposition of ``kernel`` on the grid nodes.

    Eigenfields are orthonormal under the grid quadrature and eigenvalues are
    clipped at zero from below. At most ``k_max`` modes are kept.
    """
    n_nodes = grid.size
    if k_max < 1 or k_max > n_nodes:
        raise UsageError(f"k_max must lie in [1, {n_nodes}]")
    if kernel.kind == USER_MATRIX:
        if kernel.matrix.shape[0] != n_nodes:
            raise UsageError("kernel matrix does not match the grid")
        lam, psi = _weighted_eigh(kernel.matrix, grid.weights.ravel())
        keep = min(k_max, lam.size)
        return SpectralDecomposition(grid, lam[:keep].copy(), float(lam.sum()),
                                     dense_modes=np.ascontiguousarray(psi[:, :keep].T),
                                     kernel=kernel)
    coords = [grid.t] + [grid.x] * grid.n
    weights = grid.axis_weights()
    lams, modes = [], []
    for a, (c, w) in enumerate(zip(coords, weights)):
        la, pa = _weighted_eigh(kernel.axis_kernel(c, c, a), w)
        lams.append(la)
        modes.append(pa)
    # leading products: grow a candidate set axis by axis, pruning to k_max
    vals = np.array([kernel.variance])
    idx = np.zeros((1, 0), dtype=np.int64)
    for la in lams:
        prod = (vals[:, None] * la[None, :]).ravel()
        new_idx = np.concatenate([np.repeat(idx, la.size, axis=0),
                                  np.tile(np.arange(la.size), idx.shape[0])[:, None]], axis=1)
        order = np.argsort(-prod, kind="stable")[:k_max]
        vals, idx = prod[order], new_idx[order]
    total = kernel.variance * float(np.prod([la.sum() for la in lams]))
    return SpectralDecomposition(grid, vals, total, axis_modes=tuple(modes), index=idx,
                                 kernel=kernel)


# ---------------------------------------------------------------------------
# quasimatrices and sampling
# ---------------------------------------------------------------------------

class Quasimatrix:
    """Columns of grid fields supported on a node window.

    ``values`` has shape ``window_shape + (ncols,)``; outside the window the
    columns are zero. Inner products use ``weights`` (by default the global
    trapezoid weights restricted to the window).
    """

    def __init__(self, grid: Grid, values: np.ndarray, window=None, weights=None):
        self.grid = grid
        if window is None:
            window = tuple([slice(0, grid.nt + 1)] + [slice(0, grid.nx + 1)] * grid.n)
        self.window = tuple(window)
        wshape = tuple(s.stop - s.start for s in self.window)
        values = np.asarray(values, dtype=np.float64)
        if values.shape[:-1] != wshape:
            raise UsageError(f"values {values.shape} do not match window {wshape}")
        self.values = values
        if weights is None:
            w = grid.weights[self.window]
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != wshape:
                raise UsageError("weights do not match the window")
        self.weights = w

    @property
    def ncols(self) -> int:
        return self.values.shape[-1]

    def matrix(self) -> np.ndarray:
        """Columns as a ``(n_window_nodes, ncols)`` matrix."""
        return self.values.reshape(-1, self.ncols)

    def full(self) -> np.ndarray:
        """Zero-extended columns, shape ``grid.shape + (ncols,)``."""
        out = np.zeros(self.grid.shape + (self.ncols,))
        out[self.window] = self.values
        return out

    def column(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.full()[..., i])

    def gram(self) -> np.ndarray:
        m = self.matrix()
        return m.T @ (self.weights.reshape(-1)[:, None] * m)

    def norms(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.gram()), 0.0, None))

    def restrict(self, slices) -> "Quasimatrix":
        """Zero the columns outside ``slices`` (same window)."""
        mask = np.zeros(tuple(s.stop - s.start for s in self.window), dtype=bool)
        local = []
        for s, w in zip(slices, self.window):
            a, b = max(s.start, w.start), min(s.stop, w.stop)
            if a >= b:
                raise UsageError("box does not intersect the quasimatrix window")
            local.append(slice(a - w.start, b - w.start))
        mask[tuple(local)] = True
        return Quasimatrix(self.grid, self.values * mask[..., None], self.window, self.weights)


def block_rng(seed: int, key=()) -> np.random.Generator:
    """Counter-based generator for the substream named by ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def draw_coefficients(rng: np.random.Generator, count: int, k: int) -> np.ndarray:
    """Standard normal KL coefficients, one row per sample.

    Row-major ``(count, k)`` draws make consecutive calls equivalent to one
    larger call, so samples can be generated incrementally.
    """
    return rng.standard_normal((count, k))


def sample_gp(dec: SpectralDecomposition, count: int, seed=0, window=None,
              coefficients: np.ndarray | None = None) -> Quasimatrix:
    """Draw ``count`` samples ``sum_j sqrt(lam_j) c_j psi_j``.

    Parameters
    ----------
    dec : SpectralDecomposition
    count : int
    seed : int or numpy Generator
        Integer seeds use the substream ``block_rng(seed)``.
    window : tuple of slices, optional
        Evaluate the samples only on this node window (the result is then
        the restriction of the full samples).
    coefficients : ndarray, optional
        Pre-drawn ``(count, k)`` coefficients; overrides ``seed``.
    """
    if count < 1:
        raise UsageError("count must be >= 1")
    if coefficients is None:
        rng = seed if isinstance(seed, np.random.Generator) else block_rng(seed)
        coefficients = draw_coefficients(rng, count, dec.k)
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.shape != (count, dec.k):
        raise UsageError("coefficients must have shape (count, k)")
    modes = dec.window_modes(window)
    scaled = coefficients * np.sqrt(dec.eigenvalues)[None, :]
    vals = np.tensordot(modes, scaled, axes=([0], [1]))
    return Quasimatrix(dec.grid, vals, window)


def restrict_extend(omega: Quasimatrix, qy) -> Quasimatrix:
    """Zero every column outside the box ``qy`` (a SpaceTimeBox or node slices)."""
    slices = qy if isinstance(qy, tuple) else omega.grid.box_slices(qy)
    return omega.restrict(slices)


# ---------------------------------------------------------------------------
# covariance quality
# ---------------------------------------------------------------------------

DEGENERACY_COND = 1e12


@dataclass(frozen=True)
class GammaResult:
    value: float
    degenerate: bool
    cond: float
    lam1: float

    def __float__(self):
        return self.value


def _restricted_covariance(kernel, window, grid):
    """``(modes_on_window, eigenvalues)`` or a dense kernel matrix on the window."""
    if isinstance(kernel, SpectralDecomposition):
        return kernel.window_modes(window).reshape(kernel.k, -1).T, kernel.eigenvalues, None
    if kernel.kind == USER_MATRIX:
        idx = np.arange(grid.size).reshape(grid.shape)[tuple(window)].ravel()
        return None, None, kernel.matrix[np.ix_(idx, idx)]
    coords = [grid.t[window[0]]] + [grid.x[s] for s in window[1:]]
    mats = [kernel.axis_kernel(c, c, a) for a, c in enumerate(coords)]
    dense = np.array([[kernel.variance]])
    for m in mats:
        dense = np.kron(dense, m)
    return None, None, dense


def gamma_k(kernel, v: Quasimatrix, grid: Grid | None = None) -> GammaResult:
    """Covariance-quality factor ``k / (lam_1 * trace(C^{-1}))``.

    ``C_ij = sum v_i(z) w(z) K(z, z') w(z') v_j(z')`` over the window of
    ``v`` with the quadrature weights carried by ``v``; ``lam_1`` is the top
    eigenvalue of the kernel restricted to that window. ``kernel`` is either
    a :class:`SpectralDecomposition` (the truncated covariance actually
    sampled) or a :class:`CovarianceKernel`. A numerically singular ``C``
    gives ``value = 0`` with ``degenerate = True``.
    """
    grid = grid or v.grid
    k = v.ncols
    if k < 1:
        raise UsageError("gamma_k needs at least one field")
    w = v.weights.reshape(-1)
    vm = v.matrix()
    g = vm.T @ (w[:, None] * vm)
    if not np.allclose(g, np.eye(k), atol=1e-8):
        raise UsageError("fields must be orthonormal under the quadrature")
    modes, lam, dense = _restricted_covariance(kernel, v.window, grid)
    sw = np.sqrt(w)
    if dense is None:
        b = vm.T @ (w[:, None] * modes)            # (k, K)
        c = (b * lam[None, :]) @ b.T
        half = np.sqrt(lam)[:, None] * (modes.T * sw[None, :])
        lam1 = float(np.linalg.eigvalsh(half @ half.T)[-1])
    else:
        c = vm.T @ (w[:, None] * dense * w[None, :]) @ vm
        lam1 = float(np.linalg.eigvalsh(sw[:, None] * dense * sw[None, :])[-1])
    c = (c + c.T) / 2.0
    ev = np.linalg.eigvalsh(c)
    if lam1 <= 0 or ev[-1] <= 0:
        return GammaResult(0.0, True, np.inf, max(lam1, 0.0))
    cond = ev[-1] / ev[0] if ev[0] > 0 else np.inf
    if ev[0] <= 0 or cond > DEGENERACY_COND:
        return GammaResult(0.0, True, float(cond), lam1)
    value = k / (lam1 * float(np.sum(1.0 / ev)))
    return GammaResult(min(value, 1.0), False, float(cond), lam1)


@dataclass
class GammaEstimate:
    value: float
    per_block: list
    degenerate: bool


def estimate_Gamma_eps(tree, kernel, table, k: int = 10, grid: Grid | None = None,
                       leaves=None) -> GammaEstimate:
    """Worst covariance quality over the admissible leaves of ``tree``.

    For each admissible, not causally zero leaf the exact block is read from
    the kernel table, its top-``k`` right singular fields are computed by a
    dense weighted SVD, and :func:`gamma_k` is evaluated on the source box.
    Blocks whose numerical rank is below ``k`` use their full rank.
    """
    from .geometry import ADMISSIBLE

    grid = grid or table.grid
    idx = np.nonzero(tree.status == ADMISSIBLE)[0] if leaves is None else np.asarray(leaves)
    per = []
    for i in idx:
        qx, qy = tree.leaf_boxes(int(i))
        dst, src = grid.box_slices(qx), grid.box_slices(qy)
        blk = table.block(dst, src)
        nd = int(np.prod([s.stop - s.start for s in dst]))
        mat = blk.reshape(nd, -1)
        wx = window_weights(grid, dst).ravel()
        wy = window_weights(grid, src).ravel()
        _, s, vv = weighted_svd(mat, wx, wy)
        if s.size == 0 or s[0] == 0:
            continue
        r = int(min(k, np.sum(s > 1e-12 * s[0])))
        vq = Quasimatrix(grid, vv[:, :r].reshape(tuple(x.stop - x.start for x in src) + (r,)),
                         src, window_weights(grid, src))
        res = gamma_k(kernel, vq, grid)
        per.append((int(i), res))
    if not per:
        raise UsageError("no admissible block with nonzero kernel")
    value = min(r.value for _, r in per)
    return GammaEstimate(value, per, any(r.degenerate for _, r in per))


__all__ = [
    "CovarianceKernel", "SpectralDecomposition", "Quasimatrix", "GammaResult",
    "GammaEstimate", "spectral_decompose", "sample_gp", "restrict_extend",
    "gamma_k", "estimate_Gamma_eps", "block_rng", "draw_coefficients",
    "window_axis_weights",
]
