"""End-to-end learning of a Green's function, evaluation, L1 error and persistence.

The model keeps the partition tree and one low-rank factorisation per learned
admissible leaf. Factors are stored on the leaf's node windows only; all
other leaves (non-admissible near-diagonal pairs and causal-zero pairs) are
implicitly zero.
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from ._blocks import window_shape, window_weights
from .errors import (ChecksumError, InternalConsistencyError, ModelFormatError,
                     ResourceError, TruncatedFileError, UsageError, VersionMismatchError)
from .geometry import (ADMISSIBLE, CAUSAL_ZERO, NON_ADMISSIBLE, PartitionTree, SpaceTimeBox,
                       build_partition)
from .rsvd import DEFAULT_RANK_CAP, DEFAULT_TOL, LowRankBlock, SolverBlockOperator, learn_block
from .sampling import CovarianceKernel, spectral_decompose
from .solver import DiscreteKernelTable, Grid, HeatSeriesOracle, ParabolicSolver

FORMAT_VERSION = 1
MAGIC = b"PGREENMD"
_PREAMBLE = struct.Struct("<8sIQQ")  # magic, version, header length, total length
_DIGEST = 32


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class GreensApproximant:
    """Hierarchical low-rank approximation of a Green's function.

    Attributes
    ----------
    tree : PartitionTree
    grid : Grid
        Training grid; factor fields live on its node windows.
    blocks : dict
        Leaf index -> :class:`LowRankBlock` for every admissible leaf that is
        not causal-zero (rank 0 when the sketch was empty).
    metadata : dict
        Seed, kernel and solver configuration, ``k``, ``p``, ``pairs_total``
        and the format version.
    """

    tree: PartitionTree
    grid: Grid
    blocks: dict
    metadata: dict = field(default_factory=dict)

    @property
    def pairs_total(self) -> int:
        return int(sum(b.pairs_used for b in self.blocks.values()))

    @property
    def n(self) -> int:
        return self.grid.n

    def ranks(self) -> dict:
        return {i: b.rank for i, b in self.blocks.items()}

    def leaf_windows(self, i: int) -> tuple:
        qx, qy = self.tree.leaf_boxes(i)
        return self.grid.box_slices(qx), self.grid.box_slices(qy)

    def evaluate(self, x, t, y, s) -> np.ndarray:
        return evaluate(self, x, t, y, s)


def _check_alignment(grid: Grid, n_levels: int) -> None:
    if grid.nx % (2 ** n_levels):
        raise UsageError(f"nx={grid.nx} must be divisible by 2**n_levels={2 ** n_levels}")
    if grid.nt % (4 ** n_levels):
        raise UsageError(f"nt={grid.nt} must be divisible by 4**n_levels={4 ** n_levels}")


def learnable_leaves(tree: PartitionTree) -> np.ndarray:
    """Indices of admissible leaves that are not causal-zero."""
    return np.nonzero(tree.status == ADMISSIBLE)[0]


def learn_greens(solver: ParabolicSolver, kernel: CovarianceKernel, n_levels: int,
                 k: int | None = None, p: int | None = None, seed: int = 0,
                 tol: float = DEFAULT_TOL, rank_cap: int = DEFAULT_RANK_CAP,
                 rho: float = 1.0, beta: float = 1.0, k_max: int = 200,
                 threads: int | None = None, max_blocks: int = 200_000,
                 decomposition=None) -> GreensApproximant:
    """Learn the Green's function of ``solver`` on the hierarchical partition.

    Parameters
    ----------
    solver : ParabolicSolver
        Source of forward and adjoint solves; its counters are used to check
        the pair accounting.
    kernel : CovarianceKernel
        Covariance of the probe forcings.
    n_levels : int
        Depth of the partition (at least 1).
    k, p : int or None
        Fixed rank and oversampling per block; ``k=None`` selects the adaptive
        rank with tolerance ``tol`` and cap ``rank_cap``.
    seed : int
        Master seed. Block ``(level, ix, iy)`` draws from the substream keyed
        by its indices, so results do not depend on ``threads``.
    threads : int, optional
        Worker threads (defaults to the CPU count).
    max_blocks : int
        Resource cap on the number of learned blocks.
    decomposition : SpectralDecomposition, optional
        Precomputed decomposition of ``kernel`` on the solver grid.
    """
    if n_levels < 1:
        raise UsageError("n_levels must be >= 1")
    grid = solver.grid
    _check_alignment(grid, n_levels)
    tree = build_partition(grid.n, n_levels, rho=rho, beta=beta)
    leaves = learnable_leaves(tree)
    if leaves.size > max_blocks:
        raise ResourceError(f"n_levels={n_levels} needs {leaves.size} blocks, above max_blocks={max_blocks}")
    dec = decomposition if decomposition is not None else spectral_decompose(
        kernel, grid, min(k_max, grid.size))
    before = solver.counts["forward"] + solver.counts["adjoint"]

    def one(i):
        i = int(i)
        qx, qy = tree.leaf_boxes(i)
        op = SolverBlockOperator(solver, grid.box_slices(qx), grid.box_slices(qy))
        key = (int(seed), int(tree.level[i]), *map(int, tree.ix[i]), *map(int, tree.iy[i]))
        try:
            return learn_block(op, dec, k=k, p=p, seed=key, tol=tol, rank_cap=rank_cap, leaf=i)
        except Exception as exc:
            exc.args = (f"block {i} (level {tree.level[i]}): {exc}",) + exc.args[1:]
            raise

    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            learned = list(pool.map(one, leaves))
    else:
        learned = [one(i) for i in leaves]
    blocks = {int(i): b for i, b in zip(leaves, learned)}
    issued = solver.counts["forward"] + solver.counts["adjoint"] - before
    model = GreensApproximant(tree, grid, blocks)
    if model.pairs_total != issued:
        raise InternalConsistencyError(
            f"pair accounting mismatch: blocks report {model.pairs_total}, solver issued {issued}")
    model.metadata = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "seed": int(seed),
        "k": k, "p": p, "adaptive": k is None, "tol": float(tol), "rank_cap": int(rank_cap),
        "n_levels": int(n_levels), "rho": float(rho), "beta": float(beta),
        "kernel": kernel.to_dict(), "kl_modes": int(dec.k),
        "grid": grid.to_dict(), "coefficient": solver.coeff.describe(),
        "substeps": int(solver.substeps),
        "pairs_total": model.pairs_total,
        "blocks_learned": len(blocks),
    }
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _axis_interp(coord: np.ndarray, start: int, npts: int):
    """Lower node and weight pair for linear interpolation along one axis.

    ``coord`` is in global node units. Values within 1e-9 of a node snap to
    it, so node evaluations reproduce stored values exactly.
    """
    c = np.asarray(coord, dtype=float) - start
    r = np.rint(c)
    c = np.where(np.abs(c - r) < 1e-9, r, c)
    if npts == 1:
        return np.zeros(c.shape, dtype=np.int64), np.zeros(c.shape)
    c = np.clip(c, 0.0, npts - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.int64), npts - 2)
    return i0, c - i0


def _interp_points(values: np.ndarray, window: tuple, coords: list) -> np.ndarray:
    """Multilinear interpolation of ``values`` (window shape + (r,)) at points.

    ``coords`` lists one array of global node coordinates per axis.
    """
    shp = window_shape(window)
    idx, frac = zip(*(_axis_interp(c, w.start, m) for c, w, m in zip(coords, window, shp)))
    d = len(shp)
    out = np.zeros(idx[0].shape + values.shape[-1:])
    for corner in range(2 ** d):
        wgt = np.ones(idx[0].shape)
        sel = []
        for a in range(d):
            bit = (corner >> a) & 1
            wgt = wgt * (frac[a] if bit else 1.0 - frac[a])
            sel.append(np.minimum(idx[a] + bit, shp[a] - 1))
        out += wgt[..., None] * values[tuple(sel)]
    return out


def _interp_matrix(coord: np.ndarray, start: int, npts: int) -> np.ndarray:
    i0, fr = _axis_interp(coord, start, npts)
    m = np.zeros((coord.size, npts))
    rows = np.arange(coord.size)
    m[rows, i0] += 1.0 - fr
    if npts > 1:
        m[rows, i0 + 1] += fr
    return m


def _interp_tensor(values: np.ndarray, window: tuple, axes: list) -> np.ndarray:
    """Interpolate ``values`` onto a tensor grid given by per-axis coordinates."""
    out = values
    for a, (coord, w) in enumerate(zip(axes, window)):
        mat = _interp_matrix(np.asarray(coord, float), w.start, w.stop - w.start)
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [a])), 0, a)
    return out


def _as_points(arr, m: int, n: int) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if n == 1 and a.ndim <= 1:
        a = a.reshape(-1, 1)
    a = np.atleast_2d(a)
    if a.shape != (m, n):
        raise UsageError(f"spatial points must have shape ({m}, {n})")
    return a


def evaluate(model: GreensApproximant, x, t, y, s) -> np.ndarray:
    """Evaluate the model at points ``(x, t, y, s)``.

    ``t`` and ``s`` have shape ``(m,)``; ``x`` and ``y`` ``(m, n)`` (or
    ``(m,)`` for ``n = 1``). Points on shared leaf faces belong to the leaf
    with the lower index tuple. Scalars return a 0-d array.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    m, n, g = t.shape[0], model.n, model.grid
    x = _as_points(x, m, n)
    y = _as_points(y, m, n)
    if s.shape != (m,):
        raise UsageError("t and s must have the same length")
    for arr, hi in ((x, 1.0), (y, 1.0), (t, g.T), (s, g.T)):
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > hi):
            raise UsageError("point outside the space-time domain")
    leaf = model.tree.locate(x, t / g.T, y, s / g.T)
    out = np.zeros(m)
    for i in np.unique(leaf):
        blk = model.blocks.get(int(i))
        if blk is None or blk.rank == 0:
            continue
        sel = leaf == i
        dst, src = model.leaf_windows(int(i))
        lx = blk.left.reshape(window_shape(dst) + (blk.rank,))
        ry = blk.right.reshape(window_shape(src) + (blk.rank,))
        cx = [t[sel] / g.dt] + [x[sel, a] / g.h for a in range(n)]
        cy = [s[sel] / g.dt] + [y[sel, a] / g.h for a in range(n)]
        out[sel] = np.einsum("mr,mr->m", _interp_points(lx, dst, cx), _interp_points(ry, src, cy))
    return out[0] if scalar else out


def block_values(model: GreensApproximant, i: int, tx, xs, ty, ys) -> np.ndarray:
    """Model values on a tensor grid inside leaf ``i``.

    Returns shape ``(len(tx), *lens(xs), len(ty), *lens(ys))``.
    """
    g = model.grid
    shape = (len(tx),) + tuple(len(v) for v in xs) + (len(ty),) + tuple(len(v) for v in ys)
    blk = model.blocks.get(int(i))
    if blk is None or blk.rank == 0:
        return np.zeros(shape)
    dst, src = model.leaf_windows(int(i))
    lx = blk.left.reshape(window_shape(dst) + (blk.rank,))
    ry = blk.right.reshape(window_shape(src) + (blk.rank,))
    L = _interp_tensor(lx, dst, [np.asarray(tx) / g.dt] + [np.asarray(v) / g.h for v in xs])
    R = _interp_tensor(ry, src, [np.asarray(ty) / g.dt] + [np.asarray(v) / g.h for v in ys])
    return np.tensordot(L, R, axes=([-1], [-1]))


# ---------------------------------------------------------------------------
# L1 error
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorReport:
    """Relative L1 error with its split over leaf types.

    ``admissible`` and ``non_admissible`` are the contributions of the two
    regions to ``relative`` (causal-zero leaves contribute nothing).
    """

    relative: float
    admissible: float
    non_admissible: float
    error_mass: float
    reference_mass: float
    quadrature: str
    oracle: str

    @property
    def nonadmissible_share(self) -> float:
        return self.non_admissible / self.relative if self.relative > 0 else 0.0

    def to_dict(self) -> dict:
        return {"relative": self.relative, "admissible": self.admissible,
                "non_admissible": self.non_admissible, "error_mass": self.error_mass,
                "reference_mass": self.reference_mass, "quadrature": self.quadrature,
                "oracle": self.oracle}


def _leaf_box_bounds(box: SpaceTimeBox, T: float):
    return np.array(box.lo), np.array(box.hi), box.t0 * T, box.t1 * T


def _gauss(lo: float, hi: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    # Gauss-Legendre points are irrational offsets, so they never coincide
    # with the dyadic training nodes (except the centre when m is odd)
    xg, wg = np.polynomial.legendre.leggauss(m)
    half = (hi - lo) / 2.0
    return lo + half * (xg + 1.0), half * wg


def _heat_l1(model, oracle: HeatSeriesOracle, m: int):
    g, tree, n = model.grid, model.tree, model.n
    if oracle.n != n or abs(oracle.T - g.T) > 1e-12:
        raise UsageError("oracle dimension or horizon differs from the model")
    err_adm = ref_adm = 0.0
    for i in np.nonzero(tree.status == ADMISSIBLE)[0]:
        qx, qy = tree.leaf_boxes(int(i))
        xlo, xhi, t0, t1 = _leaf_box_bounds(qx, g.T)
        ylo, yhi, s0, s1 = _leaf_box_bounds(qy, g.T)
        tx, wtx = _gauss(t0, t1, m)
        ty, wty = _gauss(s0, s1, m)
        xs, ys, wxs, wys = [], [], [], []
        for a in range(n):
            v, w = _gauss(xlo[a], xhi[a], m)
            xs.append(v)
            wxs.append(w)
            v, w = _gauss(ylo[a], yhi[a], m)
            ys.append(v)
            wys.append(w)
        wts = np.ones(())
        for w in [wtx] + wxs + [wty] + wys:
            wts = np.multiply.outer(wts, w)
        G = oracle.block(xs, tx, ys, ty)
        Gt = block_values(model, int(i), tx, xs, ty, ys)
        err_adm += float(np.sum(wts * np.abs(G - Gt)))
        ref_adm += float(np.sum(wts * np.abs(G)))
    nonadm = np.nonzero(tree.status == NON_ADMISSIBLE)[0]
    mass_non = 0.0
    if nonadm.size:
        lv = tree.level[nonadm]
        side, dur = 2.0 ** (-lv), 4.0 ** (-lv) * g.T
        xlo = tree.ix[nonadm, :n] * side[:, None]
        ylo = tree.iy[nonadm, :n] * side[:, None]
        t0, s0 = tree.ix[nonadm, n] * dur, tree.iy[nonadm, n] * dur
        vals = oracle.box_integral(xlo, xlo + side[:, None], t0, t0 + dur,
                                   ylo, ylo + side[:, None], s0, s0 + dur)
        mass_non = float(np.sum(np.abs(vals)))
    desc = (f"Gauss-Legendre rule, {m} points per axis per admissible leaf; "
            "exact series integrals on non-admissible leaves")
    return err_adm, ref_adm, mass_non, desc


def _table_l1(model, table: DiscreteKernelTable):
    g, tg, tree, n = model.grid, table.grid, model.tree, model.n
    if tg.n != n or abs(tg.T - g.T) > 1e-12:
        raise UsageError("table dimension or horizon differs from the model")
    L = tree.n_levels
    if tg.nx % (2 ** L) or tg.nt % (4 ** L):
        raise UsageError("table grid is not aligned with the partition leaves")
    err_adm = ref_adm = mass_non = 0.0
    for i in np.nonzero(tree.status != CAUSAL_ZERO)[0]:
        qx, qy = tree.leaf_boxes(int(i))
        dst, src = tg.box_slices(qx), tg.box_slices(qy)
        G = table.block(dst, src)
        w = np.multiply.outer(window_weights(tg, dst), window_weights(tg, src))
        if tree.status[i] == NON_ADMISSIBLE:
            mass_non += float(np.sum(w * np.abs(G)))
            continue
        axes_x = [tg.t[dst[0]]] + [tg.x[sl] for sl in dst[1:]]
        axes_y = [tg.t[src[0]]] + [tg.x[sl] for sl in src[1:]]
        Gt = block_values(model, int(i), axes_x[0], axes_x[1:], axes_y[0], axes_y[1:])
        err_adm += float(np.sum(w * np.abs(G - Gt)))
        ref_adm += float(np.sum(w * np.abs(G)))
    desc = f"trapezoid rule on the table nodes ({tg.nx}x{tg.nt}) per leaf"
    return err_adm, ref_adm, mass_non, desc


def l1_error(model: GreensApproximant, oracle, points_per_axis: int = 4) -> ErrorReport:
    """Relative L1 error ``||G - G_model|| / ||G||`` over ``U x U``.

    With a :class:`HeatSeriesOracle` admissible leaves use a Gauss-Legendre
    product rule with ``points_per_axis`` points per axis (these points avoid
    the training nodes) and non-admissible leaves, where the model is zero, use exact box
    integrals. With a :class:`DiscreteKernelTable` every leaf uses the
    trapezoid rule on the table nodes. Causal-zero leaves, where both kernels
    vanish, are skipped. The reference mass uses the same quadrature, so a
    zero model scores exactly 1.
    """
    if isinstance(oracle, HeatSeriesOracle):
        if points_per_axis < 1:
            raise UsageError("points_per_axis must be >= 1")
        err_adm, ref_adm, mass_non, desc = _heat_l1(model, oracle, points_per_axis)
    elif isinstance(oracle, DiscreteKernelTable):
        err_adm, ref_adm, mass_non, desc = _table_l1(model, oracle)
    else:
        raise UsageError("oracle must be a HeatSeriesOracle or a DiscreteKernelTable")
    ref = ref_adm + mass_non
    if ref <= 0:
        raise UsageError("oracle has zero L1 mass")
    num = err_adm + mass_non
    name = type(oracle).__name__
    return ErrorReport(num / ref, err_adm / ref, mass_non / ref, num, ref, desc, name)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _model_arrays(model: GreensApproximant) -> list:
    tree = model.tree
    ids = np.array(sorted(model.blocks), dtype=np.int64)
    blks = [model.blocks[int(i)] for i in ids]
    ranks = np.array([b.rank for b in blks], dtype=np.int64)
    pairs = np.array([b.pairs_used for b in blks], dtype=np.int64)
    ps = np.array([b.p for b in blks], dtype=np.int64)
    regime = np.array([bool(b.in_theory_regime) for b in blks], dtype=np.int8)
    nsv = np.array([b.singular_values.size for b in blks], dtype=np.int64)
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    left = cat([b.left.ravel() for b in blks])
    right = cat([b.right.ravel() for b in blks])
    sv = cat([np.asarray(b.singular_values, float).ravel() for b in blks])
    return [
        ("leaf_level", tree.level.astype(np.int64)),
        ("leaf_ix", tree.ix.astype(np.int64)),
        ("leaf_iy", tree.iy.astype(np.int64)),
        ("leaf_status", tree.status.astype(np.int8)),
        ("leaf_admissible", tree.admissible.astype(np.int8)),
        ("adm_per_level", tree.adm_per_level.astype(np.int64)),
        ("block_leaf", ids), ("block_rank", ranks), ("block_pairs", pairs),
        ("block_p", ps), ("block_regime", regime), ("block_nsv", nsv),
        ("left", left.astype(np.float64)), ("right", right.astype(np.float64)),
        ("singular_values", sv.astype(np.float64)),
    ]


def to_bytes(model: GreensApproximant) -> bytes:
    arrays = _model_arrays(model)
    header = {
        "metadata": model.metadata,
        "grid": model.grid.to_dict(),
        "tree": {"n": model.tree.n, "n_levels": model.tree.n_levels,
                 "beta": model.tree.beta, "rho": model.tree.rho,
                 "n_nonadm": int(model.tree.n_nonadm)},
        "arrays": [{"name": nm, "dtype": a.dtype.newbyteorder("<").str, "shape": list(a.shape)}
                   for nm, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
                       for _, a in arrays)
    total = _PREAMBLE.size + len(hbytes) + len(payload) + _DIGEST
    body = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(hbytes), total) + hbytes + payload
    return body + hashlib.sha256(body).digest()


def serialize(model: GreensApproximant, path) -> None:
    """Write the model; the file is byte-identical for identical models."""
    data = to_bytes(model)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise ResourceError(f"cannot write model file {path}: {exc}") from exc


def from_bytes(data: bytes) -> GreensApproximant:
    if len(data) < _PREAMBLE.size:
        raise TruncatedFileError("model file is shorter than its preamble")
    magic, version, hlen, total = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a model file (bad magic string)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {FORMAT_VERSION}")
    if len(data) < total:
        raise TruncatedFileError(f"model file has {len(data)} bytes, expected {total}")
    if len(data) > total:
        raise ModelFormatError("trailing bytes after the checksum")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("model file checksum mismatch")
    off = _PREAMBLE.size
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    off += hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dt.itemsize
        if off + nbytes > len(body):
            raise ModelFormatError("array table exceeds the payload")
        arrays[spec["name"]] = np.frombuffer(body, dtype=dt, count=count,
                                             offset=off).reshape(spec["shape"]).astype(dt.newbyteorder("="))
        off += nbytes
    if off != len(body):
        raise ModelFormatError("payload size does not match the array table")
    th = header["tree"]
    tree = PartitionTree(th["n"], th["n_levels"], beta=th["beta"], rho=th["rho"],
                         level=arrays["leaf_level"], ix=arrays["leaf_ix"], iy=arrays["leaf_iy"],
                         status=arrays["leaf_status"],
                         admissible=arrays["leaf_admissible"].astype(bool),
                         adm_per_level=arrays["adm_per_level"], n_nonadm=th["n_nonadm"])
    gh = header["grid"]
    grid = Grid(gh["n"], gh["nx"], gh["nt"], gh["T"])
    model = GreensApproximant(tree, grid, {}, header["metadata"])
    lo = ro = so = 0
    for j, i in enumerate(arrays["block_leaf"]):
        i = int(i)
        r = int(arrays["block_rank"][j])
        dst, src = model.leaf_windows(i)
        nx_, ny_ = int(np.prod(window_shape(dst))), int(np.prod(window_shape(src)))
        left = arrays["left"][lo:lo + nx_ * r].reshape(nx_, r)
        right = arrays["right"][ro:ro + ny_ * r].reshape(ny_, r)
        ns = int(arrays["block_nsv"][j])
        sv = arrays["singular_values"][so:so + ns]
        lo, ro, so = lo + nx_ * r, ro + ny_ * r, so + ns
        model.blocks[i] = LowRankBlock(dst, src, left, right, int(arrays["block_pairs"][j]), i,
                                       int(arrays["block_p"][j]), sv,
                                       bool(arrays["block_regime"][j]))
    if lo != arrays["left"].size or ro != arrays["right"].size:
        raise ModelFormatError("factor arrays do not match the block table")
    return model


def deserialize(path) -> GreensApproximant:
    """Read a model file, rejecting bad magic, version, truncation or checksum."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ResourceError(f"cannot read model file {path}: {exc}") from exc
    return from_bytes(data)


# ---------------------------------------------------------------------------
# learning curve
# ---------------------------------------------------------------------------

@dataclass
class CurvePoint:
    target: float
    seed: int
    n_levels: int
    error: float
    pairs: int


@dataclass
class LearningCurve:
    points: list
    slope: float

    def rows(self) -> list:
        return [{"target": p.target, "seed": p.seed, "n_levels": p.n_levels,
                 "error": p.error, "pairs": p.pairs, "slope": self.slope} for p in self.points]


def learning_curve(eps_targets, solver: ParabolicSolver, kernel: CovarianceKernel,
                   seeds=(0,), C_diag: float | None = None, oracle=None,
                   points_per_axis: int = 4, **learn_kw) -> LearningCurve:
    """Pairs against achieved error over a sequence of accuracy targets.

    For each target the depth is ``theory.n_eps(target, C_diag)`` and every
    block uses the adaptive rank. The slope is the least-squares slope of
    ``log pairs`` against ``log(1 / error)`` over all points.

    ``C_diag`` defaults to the value fitted from the heat-series oracle and
    ``oracle`` to that oracle; both require the heat coefficient.
    """
    from .theory import fit_c_diag, n_eps

    targets = [float(e) for e in eps_targets]
    if not targets:
        raise UsageError("at least one target is required")
    if any(a <= b for a, b in zip(targets, targets[1:])):
        raise UsageError("targets must be sorted in decreasing order")
    if oracle is None or C_diag is None:
        if solver.coeff.name != "heat":
            raise UsageError("oracle and C_diag are required for non-heat coefficients")
        heat = HeatSeriesOracle(solver.grid.n, solver.grid.T)
        oracle = heat if oracle is None else oracle
        if C_diag is None:
            C_diag = fit_c_diag(heat, np.logspace(-3, -1, 5), 1, solver.grid.T)
    learn_kw.setdefault("k", None)
    dec = spectral_decompose(kernel, solver.grid, min(learn_kw.pop("k_max", 200), solver.grid.size))
    points = []
    for eps in targets:
        levels = int(n_eps(eps, C_diag))
        for sd in seeds:
            model = learn_greens(solver, kernel, levels, seed=int(sd), decomposition=dec, **learn_kw)
            rep = l1_error(model, oracle, points_per_axis)
            points.append(CurvePoint(eps, int(sd), levels, rep.relative, model.pairs_total))
    if len({p.n_levels for p in points}) > 1:
        from .theory import loglog_slope

        slope = loglog_slope([1.0 / p.error for p in points], [p.pairs for p in points])
    else:
        slope = float("nan")
    return LearningCurve(points, slope)
