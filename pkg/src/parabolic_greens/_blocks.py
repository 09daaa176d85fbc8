"""Block-local quadrature and weighted linear algebra shared by several modules."""
from __future__ import annotations

import numpy as np

from .errors import UsageError


def local_axis_weights(npts: int, step: float) -> np.ndarray:
    """Trapezoid weights of a closed sub-interval with ``npts`` nodes."""
    if npts < 1:
        raise UsageError("empty window")
    if npts == 1:
        return np.zeros(1)
    w = np.full(npts, step)
    w[0] = w[-1] = step / 2.0
    return w


def window_axis_weights(grid, slices) -> list:
    """Per-axis local trapezoid weights on a node window (time first)."""
    out = [local_axis_weights(slices[0].stop - slices[0].start, grid.dt)]
    for s in slices[1:]:
        out.append(local_axis_weights(s.stop - s.start, grid.h))
    return out


def window_weights(grid, slices) -> np.ndarray:
    """Tensor local trapezoid weights with the window's shape."""
    ws = window_axis_weights(grid, slices)
    w = ws[0]
    for a in ws[1:]:
        w = np.multiply.outer(w, a)
    return w


def global_window_weights(grid, slices) -> np.ndarray:
    """Global trapezoid weights restricted to a window."""
    w = grid.time_weights[slices[0]]
    for s in slices[1:]:
        w = np.multiply.outer(w, grid.space_weights[s])
    return w


def window_shape(slices) -> tuple:
    return tuple(s.stop - s.start for s in slices)


def weighted_svd(mat: np.ndarray, wx: np.ndarray, wy: np.ndarray):
    """SVD of a kernel block in ``L2(wy) -> L2(wx)``.

    Returns ``(u, s, v)`` with ``mat = u @ diag(s) @ v.T``, ``u.T @ diag(wx) @ u = I``
    and ``v.T @ diag(wy) @ v = I`` on the columns with positive weight.
    """
    sx = np.sqrt(wx)
    sy = np.sqrt(wy)
    b = sx[:, None] * mat * sy[None, :]
    uu, s, vt = np.linalg.svd(b, full_matrices=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sx[:, None] > 0, uu / np.where(sx > 0, sx, 1.0)[:, None], 0.0)
        v = np.where(sy[:, None] > 0, vt.T / np.where(sy > 0, sy, 1.0)[:, None], 0.0)
    return u, s, v


def tail_energy(s: np.ndarray, k: int) -> float:
    """``sqrt(sum_{j > k} s_j^2)``, the best rank-``k`` error."""
    return float(np.sqrt(np.sum(s[k:] ** 2)))
