"""Parabolic geometry on the unit space-time cylinder.

Distances use the parabolic metric ``max(|x - y|_inf, sqrt(|t - s| / beta))``,
which balances one spatial length against the square root of a temporal one.
The hierarchical partition of ``U x U`` (``U = (0,1)^n x (0,1)``) halves each
spatial axis and quarters the time axis at every level, so that a level-``L``
box has spatial side ``2**-L`` and duration ``4**-L``.

A pair node at level ``L`` is non-admissible when every index (spatial and
temporal) differs by at most one; admissible nodes become leaves right away,
non-admissible ones are split into ``(4 * 2**n)**2`` children until the last
level, where every remaining node becomes a leaf.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import InternalConsistencyError, ResourceError, UsageError

NON_ADMISSIBLE = 0
ADMISSIBLE = 1
CAUSAL_ZERO = 2
STATUS_NAMES = {NON_ADMISSIBLE: "non-admissible", ADMISSIBLE: "admissible",
                CAUSAL_ZERO: "causal-zero"}

DEFAULT_LEAF_CAP = 1_000_000


# ---------------------------------------------------------------------------
# points and boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimePoint:
    """A point ``(x, t)`` with ``x`` in ``R^n``."""

    x: tuple
    t: float

    def __init__(self, x, t, T: float | None = None):
        xs = tuple(float(v) for v in np.atleast_1d(np.asarray(x, dtype=float)))
        if len(xs) < 1:
            raise UsageError("a space-time point needs at least one spatial coordinate")
        t = float(t)
        if T is not None and not (0.0 <= t <= T):
            raise UsageError(f"time {t} outside [0, {T}]")
        object.__setattr__(self, "x", xs)
        object.__setattr__(self, "t", t)

    @property
    def n(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class SpaceTimeBox:
    """Axis-aligned box ``prod_i [lo_i, hi_i] x [t0, t1]``.

    ``level`` and ``indices`` record the position in the hierarchical tree
    (``indices`` holds the ``n`` spatial indices followed by the time index);
    boxes built by hand may leave them at their defaults.
    """

    lo: tuple
    hi: tuple
    t0: float
    t1: float
    level: int = 0
    indices: tuple = ()

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or len(lo) < 1:
            raise UsageError("box bounds must have the same positive length")
        if any(h < l for l, h in zip(lo, hi)) or self.t1 < self.t0:
            raise UsageError("box intervals must satisfy lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo))) * self.duration

    def contains(self, x, t) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi)
                    and self.t0 <= t <= self.t1)

    @classmethod
    def from_indices(cls, level: int, indices: Sequence[int]) -> "SpaceTimeBox":
        """Box of the unit-domain tree at ``level`` with tree ``indices``."""
        idx = tuple(int(i) for i in indices)
        h = 2.0 ** (-level)
        tau = 4.0 ** (-level)
        lo = tuple(i * h for i in idx[:-1])
        hi = tuple((i + 1) * h for i in idx[:-1])
        return cls(lo, hi, idx[-1] * tau, (idx[-1] + 1) * tau, level, idx)


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not beta > 0.0:
        raise UsageError(f"beta must be positive, got {beta}")
    return beta


def metric(p: SpaceTimePoint, q: SpaceTimePoint, beta: float = 1.0) -> float:
    """Parabolic distance ``max(|x - y|_inf, sqrt(|t - s| / beta))``."""
    beta = _check_beta(beta)
    if p.n != q.n:
        raise UsageError(f"dimension mismatch: {p.n} vs {q.n}")
    dx = max(abs(a - b) for a, b in zip(p.x, q.x))
    return max(dx, math.sqrt(abs(p.t - q.t) / beta))


def diameter(q: SpaceTimeBox, beta: float = 1.0) -> float:
    """Supremum of the metric over pairs of points of ``q``."""
    beta = _check_beta(beta)
    side = max(h - l for l, h in zip(q.lo, q.hi))
    return max(side, math.sqrt(q.duration / beta))


def _gap(a0, a1, b0, b1):
    return max(0.0, b0 - a1, a0 - b1)


def distance(qx: SpaceTimeBox, qy: SpaceTimeBox, beta: float = 1.0) -> float:
    """Infimum of the metric over ``qx x qy``; zero when the boxes meet."""
    beta = _check_beta(beta)
    if qx.n != qy.n:
        raise UsageError(f"dimension mismatch: {qx.n} vs {qy.n}")
    gx = max(_gap(a0, a1, b0, b1) for a0, a1, b0, b1 in zip(qx.lo, qx.hi, qy.lo, qy.hi))
    gt = _gap(qx.t0, qx.t1, qy.t0, qy.t1)
    return max(gx, math.sqrt(gt / beta))


def is_admissible(qx: SpaceTimeBox, qy: SpaceTimeBox, rho: float = 1.0,
                  beta: float = 1.0) -> bool:
    """True when ``distance >= rho * max(diameters)`` (equality counts)."""
    if not rho > 0:
        raise UsageError(f"rho must be positive, got {rho}")
    return distance(qx, qy, beta) >= rho * max(diameter(qx, beta), diameter(qy, beta))


def nonadm_width(n_eps: int) -> float:
    """Width ``sqrt(2) * 2**(-2 n_eps)`` of the non-admissible temporal band."""
    if n_eps < 1:
        raise UsageError("n_eps must be at least 1")
    return math.sqrt(2.0) * 2.0 ** (-2 * n_eps)


# ---------------------------------------------------------------------------
# closed-form block counts
# ---------------------------------------------------------------------------

def nonadm_count_closed(n: int, n_levels: int) -> int:
    """Number of non-admissible nodes at the last level, ``(3 4^L - 2)(3 2^L - 2)^n``."""
    return (3 * 4 ** n_levels - 2) * (3 * 2 ** n_levels - 2) ** n


def adm_count_closed(n: int, level: int) -> int:
    """Admissible leaves created at ``level`` (children of the previous
    non-admissible level minus the non-admissible nodes at this level)."""
    if level < 1:
        return 0
    return (4 * 2 ** n) ** 2 * nonadm_count_closed(n, level - 1) - nonadm_count_closed(n, level)


def adm_bound(n: int, n_levels: int) -> int:
    """Upper bound ``24 * 6^n * 2^((n+2) n_levels)`` on the admissible count."""
    return 24 * 6 ** n * 2 ** ((n + 2) * n_levels)


def predicted_leaf_count(n: int, n_levels: int) -> int:
    return nonadm_count_closed(n, n_levels) + sum(
        adm_count_closed(n, L) for L in range(1, n_levels + 1))


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

def _child_offsets(n: int) -> np.ndarray:
    """Index offsets of the ``4 * 2^n`` children of a box (spatial first)."""
    axes = [range(2)] * n + [range(4)]
    return np.array(list(itertools.product(*axes)), dtype=np.int64)


def _index_rule_nonadm(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    return np.all(np.abs(ix - iy) <= 1, axis=-1)


def _causal_zero(ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    # sup(time of qx) <= inf(time of qy) at equal level
    return ix[..., -1] + 1 <= iy[..., -1]


def _expand(parents_x: np.ndarray, parents_y: np.ndarray, offsets: np.ndarray):
    """All child pairs of the given parent pairs, parent-major order."""
    scale = np.ones(offsets.shape[1], dtype=np.int64) * 2
    scale[-1] = 4
    cx = parents_x[:, None, :] * scale + offsets[None, :, :]
    cy = parents_y[:, None, :] * scale + offsets[None, :, :]
    m = offsets.shape[0]
    px = np.repeat(cx, m, axis=1)
    py = np.tile(cy, (1, m, 1))
    d = offsets.shape[1]
    return px.reshape(-1, d), py.reshape(-1, d)


@dataclass
class PartitionTree:
    """Leaves of the hierarchical partition of ``U x U``.

    Leaves are stored as flat arrays: ``level`` (per leaf), ``ix`` and ``iy``
    (``(n_leaves, n+1)`` tree indices of the target box ``qx`` and source box
    ``qy``), ``status`` (one of ``NON_ADMISSIBLE``, ``ADMISSIBLE``,
    ``CAUSAL_ZERO``) and ``admissible`` (the index rule verdict; causal-zero
    leaves may be admissible or not). When built in counting mode the leaf
    arrays are ``None`` and only the per-level counters are kept.
    """

    n: int
    n_levels: int
    beta: float = 1.0
    rho: float = 1.0
    level: np.ndarray | None = None
    ix: np.ndarray | None = None
    iy: np.ndarray | None = None
    status: np.ndarray | None = None
    admissible: np.ndarray | None = None
    adm_per_level: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_nonadm: int = 0
    _lookup: dict | None = field(default=None, repr=False, compare=False)

    @property
    def has_leaves(self) -> bool:
        return self.level is not None

    def __len__(self) -> int:
        if self.level is None:
            return int(self.adm_per_level.sum() + self.n_nonadm)
        return int(self.level.shape[0])

    def leaf_boxes(self, i: int) -> tuple[SpaceTimeBox, SpaceTimeBox]:
        L = int(self.level[i])
        return (SpaceTimeBox.from_indices(L, self.ix[i]),
                SpaceTimeBox.from_indices(L, self.iy[i]))

    def leaf_status_name(self, i: int) -> str:
        return STATUS_NAMES[int(self.status[i])]

    def iter_leaves(self) -> Iterator[tuple[int, SpaceTimeBox, SpaceTimeBox, int]]:
        for i in range(len(self)):
            qx, qy = self.leaf_boxes(i)
            yield i, qx, qy, int(self.status[i])

    def leaf_volumes(self) -> np.ndarray:
        """Volume of every leaf in ``U x U`` (unit domain)."""
        L = self.level.astype(float)
        return (2.0 ** (-L * self.n) * 4.0 ** (-L)) ** 2

    # -- point location -----------------------------------------------------

    def _keys(self, level: np.ndarray, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        n = self.n
        nl = self.n_levels
        sx = 2 ** nl
        st = 4 ** nl
        key = level.astype(np.int64)
        for a in range(n):
            key = key * sx + ix[:, a]
        key = key * st + ix[:, n]
        for a in range(n):
            key = key * sx + iy[:, a]
        key = key * st + iy[:, n]
        return key

    def _build_lookup(self):
        if self._lookup is None:
            keys = self._keys(self.level, self.ix, self.iy)
            order = np.argsort(keys, kind="stable")
            self._lookup = {"keys": keys[order], "order": order}
        return self._lookup

    def locate(self, x, t, y, s) -> np.ndarray:
        """Leaf index containing each point ``(x, t, y, s)``.

        ``x`` and ``y`` have shape ``(m, n)``; ``t`` and ``s`` shape ``(m,)``.
        Points on shared faces go to the box with the lower index, so every
        point of ``U x U`` belongs to exactly one leaf.
        """
        if not self.has_leaves:
            raise UsageError("partition was built without leaves")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        m = t.shape[0]
        if x.shape != (m, self.n) or y.shape != (m, self.n) or s.shape != (m,):
            raise UsageError("point arrays have inconsistent shapes")
        for arr in (x, y, t, s):
            if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
                raise UsageError("point outside the unit space-time domain")
        px = np.concatenate([x, t[:, None]], axis=1)
        py = np.concatenate([y, s[:, None]], axis=1)
        found_level = np.full(m, -1, dtype=np.int64)
        fx = np.zeros((m, self.n + 1), dtype=np.int64)
        fy = np.zeros((m, self.n + 1), dtype=np.int64)
        for L in range(1, self.n_levels + 1):
            mult = np.full(self.n + 1, 2.0 ** L)
            mult[-1] = 4.0 ** L
            top = (mult - 1).astype(np.int64)
            jx = np.clip(np.ceil(px * mult).astype(np.int64) - 1, 0, top)
            jy = np.clip(np.ceil(py * mult).astype(np.int64) - 1, 0, top)
            open_ = found_level < 0
            hit = open_ & (~_index_rule_nonadm(jx, jy) | (L == self.n_levels))
            found_level[hit] = L
            fx[hit] = jx[hit]
            fy[hit] = jy[hit]
        if self.n_levels == 0:
            found_level[:] = 0
        look = self._build_lookup()
        keys = self._keys(found_level, fx, fy)
        pos = np.searchsorted(look["keys"], keys)
        pos = np.clip(pos, 0, look["keys"].shape[0] - 1)
        if not np.array_equal(look["keys"][pos], keys):
            raise InternalConsistencyError("point maps outside the stored leaves")
        return look["order"][pos]


def _guard(n: int, n_levels: int, cap: int):
    predicted = predicted_leaf_count(n, n_levels)
    if predicted > cap:
        raise ResourceError(
            f"partition with n={n}, levels={n_levels} would have {predicted} leaves, "
            f"above the cap of {cap} (raise leaf_cap or lower levels)")


def build_partition(n: int, n_levels: int, rho: float = 1.0, beta: float = 1.0,
                    leaf_cap: int = DEFAULT_LEAF_CAP) -> PartitionTree:
    """Build the hierarchical partition of ``U x U`` with explicit leaves.

    Parameters
    ----------
    n : int
        Spatial dimension.
    n_levels : int
        Number of levels; ``0`` yields the single (non-admissible) root.
    rho, beta : float
        Admissibility and metric parameters. The index rule used for the
        construction is the one matching ``rho = beta = 1`` on the unit
        domain; both are recorded for the metric checks.
    leaf_cap : int
        Refuse to build when the predicted number of leaves exceeds this.
    """
    if n < 1:
        raise UsageError("spatial dimension must be >= 1")
    if n_levels < 0:
        raise UsageError("number of levels must be >= 0")
    _check_beta(beta)
    if not rho > 0:
        raise UsageError("rho must be positive")
    _guard(n, n_levels, leaf_cap)
    d = n + 1
    offsets = _child_offsets(n)
    fx = np.zeros((1, d), dtype=np.int64)
    fy = np.zeros((1, d), dtype=np.int64)
    lv, lx, ly, ladm = [], [], [], []
    adm_counts = np.zeros(n_levels + 1, dtype=np.int64)
    for L in range(1, n_levels + 1):
        cx, cy = _expand(fx, fy, offsets)
        nonadm = _index_rule_nonadm(cx, cy)
        adm = ~nonadm
        adm_counts[L] = int(adm.sum())
        lv.append(np.full(adm_counts[L], L, dtype=np.int64))
        lx.append(cx[adm])
        ly.append(cy[adm])
        ladm.append(np.ones(adm_counts[L], dtype=bool))
        fx, fy = cx[nonadm], cy[nonadm]
    lv.append(np.full(fx.shape[0], n_levels, dtype=np.int64))
    lx.append(fx)
    ly.append(fy)
    ladm.append(np.zeros(fx.shape[0], dtype=bool))
    level = np.concatenate(lv)
    ix = np.concatenate(lx)
    iy = np.concatenate(ly)
    admissible = np.concatenate(ladm)
    status = np.where(admissible, ADMISSIBLE, NON_ADMISSIBLE).astype(np.int8)
    status[_causal_zero(ix, iy)] = CAUSAL_ZERO
    return PartitionTree(n=n, n_levels=n_levels, beta=float(beta), rho=float(rho),
                         level=level, ix=ix, iy=iy, status=status,
                         admissible=admissible, adm_per_level=adm_counts,
                         n_nonadm=int(fx.shape[0]))


def count_partition(n: int, n_levels: int, chunk: int = 4096) -> PartitionTree:
    """Enumerate the partition level by level without storing leaves.

    Every child pair of every non-admissible node is generated and tested
    with the index rule, so the counts are enumerated rather than derived;
    memory stays bounded by the non-admissible frontier.
    """
    if n < 1 or n_levels < 0:
        raise UsageError("need n >= 1 and n_levels >= 0")
    d = n + 1
    offsets = _child_offsets(n)
    fx = np.zeros((1, d), dtype=np.int64)
    fy = np.zeros((1, d), dtype=np.int64)
    adm_counts = np.zeros(n_levels + 1, dtype=np.int64)
    for L in range(1, n_levels + 1):
        nxt_x, nxt_y = [], []
        for start in range(0, fx.shape[0], chunk):
            cx, cy = _expand(fx[start:start + chunk], fy[start:start + chunk], offsets)
            nonadm = _index_rule_nonadm(cx, cy)
            adm_counts[L] += int((~nonadm).sum())
            if L < n_levels:
                nxt_x.append(cx[nonadm])
                nxt_y.append(cy[nonadm])
            else:
                nxt_x.append(np.empty((int(nonadm.sum()), 0), dtype=np.int64))
        if L < n_levels:
            fx = np.concatenate(nxt_x)
            fy = np.concatenate(nxt_y)
        else:
            n_last = sum(a.shape[0] for a in nxt_x)
            fx = np.empty((n_last, d), dtype=np.int64)
    return PartitionTree(n=n, n_levels=n_levels, adm_per_level=adm_counts,
                         n_nonadm=int(fx.shape[0]))


def count_blocks(tree: PartitionTree) -> tuple[np.ndarray, int, bool]:
    """Enumerated block counts checked against the closed forms.

    Returns
    -------
    adm_per_level : ndarray
        Admissible leaves created at each level (index 0 is always 0).
    n_nonadm : int
        Non-admissible leaves (all at the last level).
    bound_check : bool
        Whether the total admissible count is below ``24 6^n 2^((n+2) L)``.

    Raises
    ------
    InternalConsistencyError
        If an enumerated count differs from its closed form.
    """
    n, nl = tree.n, tree.n_levels
    if tree.has_leaves:
        adm = np.bincount(tree.level[tree.admissible], minlength=nl + 1).astype(np.int64)
        nonadm = int((~tree.admissible).sum())
        if np.any(tree.level[~tree.admissible] != nl):
            raise InternalConsistencyError("non-admissible leaf above the last level")
    else:
        adm = np.asarray(tree.adm_per_level, dtype=np.int64)
        nonadm = int(tree.n_nonadm)
    if nonadm != nonadm_count_closed(n, nl):
        raise InternalConsistencyError(
            f"non-admissible count {nonadm} != closed form {nonadm_count_closed(n, nl)}")
    for L in range(1, nl + 1):
        if adm[L] != adm_count_closed(n, L):
            raise InternalConsistencyError(
                f"admissible count at level {L}: {adm[L]} != {adm_count_closed(n, L)}")
    bound_check = int(adm.sum()) <= adm_bound(n, nl)
    return adm, nonadm, bool(bound_check)
