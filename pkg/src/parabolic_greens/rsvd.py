"""Randomized SVD of the solution operator restricted to a block pair.

A block operator maps forcings supported on the source box ``qy`` to the
solution restricted to the target box ``qx``. Both boxes carry their local
trapezoid quadrature, so the block is an operator ``L2(qy) -> L2(qx)`` with
kernel ``G(x, y)``. The range is sketched with forward solves of
Gaussian-process forcings; the left projection ``P_Y G`` is then formed
exactly with adjoint solves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._blocks import global_window_weights, tail_energy, weighted_svd, window_shape, window_weights
from .errors import UsageError
from .sampling import (Quasimatrix, SpectralDecomposition, block_rng, draw_coefficients,
                       sample_gp)

DROP_TOL = 1e-12
DEFAULT_RANK_CAP = 32
DEFAULT_TOL = 1e-6


# ---------------------------------------------------------------------------
# block operators
# ---------------------------------------------------------------------------

class SolverBlockOperator:
    """Block of a :class:`~parabolic_greens.solver.ParabolicSolver`.

    ``forward(f)`` returns ``sum_y G(x, y) w_y f(y)`` on the target window and
    ``adjoint(q)`` returns ``sum_x G(x, y) w_x q(x)`` on the source window,
    with ``w`` the local box weights.
    """

    def __init__(self, solver, dst: tuple, src: tuple):
        self.solver = solver
        self.grid = solver.grid
        self.dst = tuple(dst)
        self.src = tuple(src)
        self.wx = window_weights(self.grid, self.dst)
        self.wy = window_weights(self.grid, self.src)
        self._fy = self.wy / global_window_weights(self.grid, self.src)
        self._fx = self.wx / global_window_weights(self.grid, self.dst)
        self.shape_x = window_shape(self.dst)
        self.shape_y = window_shape(self.src)

    @property
    def causal_zero(self) -> bool:
        # every target level precedes or equals every source level
        return self.dst[0].stop - 1 <= self.src[0].start

    def forward(self, f: np.ndarray) -> np.ndarray:
        return self.solver.apply_forward(f * self._fy[..., None], self.src, self.dst)

    def adjoint(self, q: np.ndarray) -> np.ndarray:
        return self.solver.apply_adjoint(q * self._fx[..., None], self.dst, self.src)

    def dense(self) -> np.ndarray:
        """Exact block kernel ``(n_x, n_y)`` by spike solves (not counted)."""
        ny = int(np.prod(self.shape_y))
        spikes = np.zeros(self.shape_y + (ny,))
        flat = spikes.reshape(ny, ny)
        wg = global_window_weights(self.grid, self.src).ravel()
        flat[np.arange(ny), np.arange(ny)] = 1.0 / wg
        u = self.solver._forward_window(spikes, self.src, self.dst)
        return u.reshape(-1, ny)


class DenseBlockOperator:
    """Block operator given by an explicit kernel matrix (tests and oracles)."""

    def __init__(self, kernel: np.ndarray, wx: np.ndarray, wy: np.ndarray,
                 shape_x=None, shape_y=None, src=None, dst=None):
        self.kernel = np.asarray(kernel, dtype=float)
        self.src = src
        self.dst = dst
        self.wx = np.asarray(wx, dtype=float)
        self.wy = np.asarray(wy, dtype=float)
        self.shape_x = tuple(shape_x) if shape_x is not None else self.wx.shape
        self.shape_y = tuple(shape_y) if shape_y is not None else self.wy.shape
        self.wx = self.wx.reshape(self.shape_x)
        self.wy = self.wy.reshape(self.shape_y)
        self.counts = {"forward": 0, "adjoint": 0}
        self.causal_zero = False

    def forward(self, f):
        self.counts["forward"] += f.shape[-1]
        fm = f.reshape(-1, f.shape[-1]) * self.wy.reshape(-1, 1)
        return (self.kernel @ fm).reshape(self.shape_x + (f.shape[-1],))

    def adjoint(self, q):
        self.counts["adjoint"] += q.shape[-1]
        qm = q.reshape(-1, q.shape[-1]) * self.wx.reshape(-1, 1)
        return (self.kernel.T @ qm).reshape(self.shape_y + (q.shape[-1],))

    def dense(self):
        return self.kernel


# ---------------------------------------------------------------------------
# range finder and projection
# ---------------------------------------------------------------------------

def orthonormalize(y: np.ndarray, w: np.ndarray, drop_tol: float = DROP_TOL):
    """Weighted MGS of the columns of ``y`` (``(m, c)``); returns ``(q, kept)``."""
    if y.shape[1] == 0:
        return np.zeros((y.shape[0], 0)), np.zeros(0, dtype=np.int64)
    q, kept = _kernels.weighted_mgs(np.ascontiguousarray(y.T), np.ascontiguousarray(w), drop_tol)
    return q.T, kept


def randomized_range(apply_forward, omega: Quasimatrix, wx: np.ndarray,
                     drop_tol: float = DROP_TOL):
    """Sketch ``Y = F omega`` and orthonormalise it under the weights ``wx``.

    Parameters
    ----------
    apply_forward : callable
        Maps ``(*shape_y, c)`` forcings to ``(*shape_x, c)`` solutions.
    omega : Quasimatrix
        Probe columns on the source window.
    wx : ndarray
        Target quadrature weights, shape ``shape_x``.

    Returns
    -------
    q : ndarray ``(n_x, r)``
        Orthonormal basis of the sketch (``r = 0`` flags an empty range).
    y : ndarray ``(n_x, c)``
        The raw sketch.
    """
    y = apply_forward(omega.values)
    y = y.reshape(-1, omega.ncols)
    q, _ = orthonormalize(y, wx.reshape(-1), drop_tol)
    return q, y


def project_adjoint(apply_adjoint, q: np.ndarray, shape_x, shape_y) -> np.ndarray:
    """Right factor ``R = G^T W_x Q`` so that ``P_Y G = Q R^T``."""
    if q.shape[1] == 0:
        return np.zeros((int(np.prod(shape_y)), 0))
    r = apply_adjoint(q.reshape(tuple(shape_x) + (q.shape[1],)))
    return r.reshape(-1, q.shape[1])


def truncate(q: np.ndarray, r: np.ndarray, wy: np.ndarray, k: int):
    """Best rank-``k`` truncation of ``Q R^T`` in ``L2(wx) x L2(wy)``.

    ``Q`` is orthonormal, so the singular values are those of ``R`` in
    ``L2(wy)``. Returns ``(left, right, singular_values)``.
    """
    if q.shape[1] == 0:
        return q, r, np.zeros(0)
    m = r.T @ (wy.reshape(-1)[:, None] * r)
    m = (m + m.T) / 2.0
    ev, u = np.linalg.eigh(m)
    order = np.argsort(ev)[::-1]
    ev, u = np.clip(ev[order], 0.0, None), u[:, order]
    k = min(k, q.shape[1])
    return q @ u[:, :k], r @ u[:, :k], np.sqrt(ev)


# ---------------------------------------------------------------------------
# block learning
# ---------------------------------------------------------------------------

@dataclass
class LowRankBlock:
    """Learned factorisation ``G ~ left @ right.T`` on a block pair.

    ``left`` (target window nodes x rank) is orthonormal under the target
    box quadrature; ``right`` lives on the source window.
    """

    dst: tuple
    src: tuple
    left: np.ndarray
    right: np.ndarray
    pairs_used: int
    leaf: int = -1
    p: int = 0
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    in_theory_regime: bool = True

    @property
    def rank(self) -> int:
        return int(self.left.shape[1])

    def matrix(self) -> np.ndarray:
        return self.left @ self.right.T

    def left_quasimatrix(self, grid) -> Quasimatrix:
        return Quasimatrix(grid, self.left.reshape(window_shape(self.dst) + (self.rank,)),
                           self.dst, window_weights(grid, self.dst))

    def right_quasimatrix(self, grid) -> Quasimatrix:
        return Quasimatrix(grid, self.right.reshape(window_shape(self.src) + (self.rank,)),
                           self.src, window_weights(grid, self.src))


def _draw(dec: SpectralDecomposition, rng, count: int, window) -> Quasimatrix:
    coef = draw_coefficients(rng, count, dec.k)
    return sample_gp(dec, count, coefficients=coef, window=window)


def extend_basis(q: np.ndarray, y_new: np.ndarray, w: np.ndarray, scale: float,
                 drop_tol: float = DROP_TOL) -> np.ndarray:
    """Orthonormalise new sketch columns against an existing basis ``q``.

    Existing columns are left untouched, so projections already computed for
    them stay valid. Columns whose residual is at most ``drop_tol * scale``
    are dropped. Returns only the new orthonormal columns.
    """
    z = y_new.copy()
    if q.shape[1]:
        for _ in range(2):
            z -= q @ (q.T @ (w[:, None] * z))
    res = np.sqrt(np.sum(w[:, None] * z * z, axis=0))
    top = float(res.max()) if res.size else 0.0
    if top <= drop_tol * scale or top == 0.0:
        return np.zeros((q.shape[0], 0))
    q_new, _ = orthonormalize(z, w, drop_tol * scale / top)
    if q.shape[1] and q_new.shape[1]:
        # guard against loss of orthogonality against the old basis
        q_new -= q @ (q.T @ (w[:, None] * q_new))
        nrm = np.sqrt(np.sum(w[:, None] * q_new * q_new, axis=0))
        q_new = q_new / nrm
    return q_new


def learn_block(op, dec: SpectralDecomposition, k: int | None = 10, p: int | None = None,
                seed=0, tol: float = DEFAULT_TOL, rank_cap: int = DEFAULT_RANK_CAP,
                leaf: int = -1) -> LowRankBlock:
    """Learn one block with a randomized SVD.

    Parameters
    ----------
    op : block operator
        :class:`SolverBlockOperator` or any object with ``forward``,
        ``adjoint``, ``wx``, ``wy``, ``shape_x``, ``shape_y``, ``causal_zero``
        and ``src``/``dst`` windows.
    dec : SpectralDecomposition
        Covariance of the probe forcings; samples are evaluated on the source
        window only, which equals restricting full samples to it.
    k, p : int or None
        Fixed target rank and oversampling (``p`` defaults to ``k``). With
        ``k=None`` the rank is adaptive: ``k = 1, 2, 4, ...`` with
        ``p = max(k, 4)`` until the projected block satisfies
        ``sigma_{k+1} <= tol * sigma_1``, the sketch stops gaining rank, or
        ``k`` reaches ``rank_cap``.
    seed : int, tuple or numpy Generator
        Probe stream; a tuple ``(master, *key)`` selects a substream.

    Notes
    -----
    The projection ``P_Y G`` (rank up to ``k + p``) is truncated to rank
    ``k`` by an exact SVD of its factors, so the block error can never beat
    the best rank-``k`` error. ``pairs_used`` counts the forward and adjoint
    solves actually issued; dropped degenerate sketch columns need no
    adjoint solve.
    """
    src, dst = getattr(op, "src", None), getattr(op, "dst", None)
    nx_, ny_ = int(np.prod(op.shape_x)), int(np.prod(op.shape_y))
    if op.causal_zero:
        return LowRankBlock(dst, src, np.zeros((nx_, 0)), np.zeros((ny_, 0)), 0, leaf, 0)
    if isinstance(seed, np.random.Generator):
        rng = seed
    elif isinstance(seed, tuple):
        rng = block_rng(seed[0], seed[1:])
    else:
        rng = block_rng(seed)
    wx = op.wx.reshape(-1)
    adaptive = k is None
    if adaptive:
        if rank_cap < 1:
            raise UsageError("rank_cap must be >= 1")
        kk = 1
    else:
        if k < 1:
            raise UsageError("rank k must be >= 1")
        p = k if p is None else p
        if p < 1:
            raise UsageError("oversampling p must be >= 1")
        kk = k
    q = np.zeros((nx_, 0))
    r = np.zeros((ny_, 0))
    n_fwd = 0
    scale = 0.0
    while True:
        pp = max(kk, 4) if adaptive else p
        need = kk + pp - n_fwd
        grew = False
        if need > 0:
            omega = _draw(dec, rng, need, src)
            y = op.forward(omega.values).reshape(nx_, need)
            n_fwd += need
            scale = max(scale, float(np.sqrt(np.max(np.sum(wx[:, None] * y * y, axis=0)))))
            if scale > 0:
                q_new = extend_basis(q, y, wx, scale)
                if q_new.shape[1]:
                    r_new = project_adjoint(op.adjoint, q_new, op.shape_x, op.shape_y)
                    q = np.concatenate([q, q_new], axis=1)
                    r = np.concatenate([r, r_new], axis=1)
                    grew = True
        if not adaptive:
            break
        _, _, sv = truncate(q, r, op.wy, kk)
        if sv.size == 0 or sv[0] == 0 or not grew or sv.size <= kk:
            break
        if sv[kk] <= tol * sv[0] or kk >= rank_cap:
            break
        kk = min(2 * kk, rank_cap)
    p_used = pp
    n_adj = q.shape[1]
    if n_adj == 0:
        return LowRankBlock(dst, src, q, r, n_fwd, leaf, p_used)
    left, right, sv = truncate(q, r, op.wy, kk)
    if adaptive:
        keep = int(np.sum(sv[:left.shape[1]] > tol * sv[0])) if sv[0] > 0 else 0
        keep = max(keep, 1)
        left, right = left[:, :keep], right[:, :keep]
    return LowRankBlock(dst, src, left, right, n_fwd + n_adj, leaf, p_used, sv,
                        in_theory_regime=p_used >= 4)


# ---------------------------------------------------------------------------
# probabilistic bound
# ---------------------------------------------------------------------------

def bound_factor(k: int, p: int, t: float, s: float, gamma_k: float, trace_ratio: float):
    """Error factor and failure probability of the randomized range finder.

    ``factor = sqrt(1 + t^2 s^2 (3 / gamma_k) k (k + p) / (p + 1) * trace_ratio)``
    and ``fail = t^{-p} + (s exp(-(s^2 - 1) / 2))^{k + p}``; the error of the
    projection is at most ``factor`` times the rank-``k`` tail, except with
    probability ``fail``.
    """
    if k < 1 or p < 4:
        raise UsageError("bound needs k >= 1 and p >= 4")
    if t < 1 or s < 1:
        raise UsageError("bound needs t, s >= 1")
    if not (0 < gamma_k <= 1):
        raise UsageError("gamma_k must lie in (0, 1]")
    if trace_ratio < 1:
        raise UsageError("trace ratio Tr(K) / lam_1 must be >= 1")
    factor = math.sqrt(1.0 + t * t * s * s * (3.0 / gamma_k) * k * (k + p) / (p + 1) * trace_ratio)
    fail = t ** (-p) + (s * math.exp(-(s * s - 1.0) / 2.0)) ** (k + p)
    return factor, fail


@dataclass
class RsvdReport:
    k: int
    p: int
    tail: float
    norm: float
    factor: float
    fail_prob: float
    gamma: float
    trace_ratio: float
    errors: list = field(default_factory=list)
    floors_ok: list = field(default_factory=list)

    @property
    def bound(self) -> float:
        """Relative error bound ``factor * tail / ||G||``."""
        return self.factor * self.tail / self.norm if self.norm > 0 else 0.0

    @property
    def floor(self) -> float:
        return self.tail / self.norm if self.norm > 0 else 0.0

    @property
    def exceed_fraction(self) -> float:
        if not self.errors:
            return 0.0
        return float(np.mean([e > self.bound for e in self.errors]))

    def allowed_fraction(self) -> float:
        n = max(len(self.errors), 1)
        return self.fail_prob + 3.0 * math.sqrt(self.fail_prob / n)


def block_error(block: LowRankBlock, dense: np.ndarray, wx: np.ndarray, wy: np.ndarray) -> float:
    """Relative ``L2(qx x qy)`` error of a learned block against its dense kernel."""
    diff = dense - block.matrix() if block.rank else dense
    wxy = np.outer(wx.reshape(-1), wy.reshape(-1))
    num = np.sqrt(np.sum(wxy * diff ** 2))
    den = np.sqrt(np.sum(wxy * dense ** 2))
    return float(num / den) if den > 0 else float(num)


def empirical_bound_trial(op, dec: SpectralDecomposition, k: int = 10, p: int = 10,
                          trials: int = 50, seed: int = 0, t: float = math.e, s: float = 3.0,
                          dense: np.ndarray | None = None) -> RsvdReport:
    """Monte Carlo check of :func:`bound_factor` on one block.

    Runs ``trials`` independent fixed-rank :func:`learn_block` calls, records
    each relative error, and evaluates the bound with ``gamma_k`` of the
    dense block's top-``k`` right singular fields under the sampled
    covariance restricted to the source box.
    """
    from .sampling import gamma_k

    dense = op.dense() if dense is None else dense
    wx, wy = op.wx.reshape(-1), op.wy.reshape(-1)
    _, sv, vv = weighted_svd(dense, wx, wy)
    tail = tail_energy(sv, k)
    norm = float(np.sqrt(np.sum(sv ** 2)))
    kk = int(min(k, np.sum(sv > 1e-12 * sv[0]))) if sv.size and sv[0] > 0 else 0
    grid = dec.grid
    if kk > 0:
        vq = Quasimatrix(grid, vv[:, :kk].reshape(op.shape_y + (kk,)), op.src, op.wy)
        g = gamma_k(dec, vq, grid)
        gamma = g.value if g.value > 0 else float("nan")
        # trace of the covariance restricted to the source box over its top eigenvalue
        modes = dec.window_modes(op.src).reshape(dec.k, -1)
        tr = float(np.sum(dec.eigenvalues[:, None] * modes ** 2 * wy[None, :]))
        ratio = max(tr / g.lam1, 1.0)
    else:
        gamma, ratio = 1.0, 1.0
    factor, fail = bound_factor(k, p, t, s, gamma if np.isfinite(gamma) else 1e-300, ratio)
    rep = RsvdReport(k, p, tail, norm, factor, fail, gamma, ratio)
    for i in range(trials):
        blk = learn_block(op, dec, k=k, p=p, seed=(seed, i))
        err = block_error(blk, dense, wx, wy)
        rep.errors.append(err)
        rep.floors_ok.append(err * norm >= tail * (1 - 1e-9))
    return rep
