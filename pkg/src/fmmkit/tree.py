"""Adaptive octree construction and the vertical expansion passes.

Bodies are binned onto the depth-21 Morton grid of the root cube, sorted,
and the tree is carved out of the sorted key array recursively: a cell
splits at the geometric midpoints of its (untightened) cube whenever it
holds more than ``ncrit`` bodies.  Cell storage is SoA; subtrees occupy
contiguous index ranges (pre-order), which the traversals exploit.

``shape="rect"`` shrinks each cell's box to the bodies it actually holds
(the assignment itself is unchanged), ``center_mode`` picks the expansion
center, and ``bmax``/``rmax`` are the body-radius and corner-radius used by
the acceptance criteria.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _taylor as _t
from .geometry import (
    MAX_LEVEL,
    Aabb,
    MortonKey,
    ParticleSet,
    _compact21_u64,
    _encode_points,
    compute_bounds,
)
from .kernels import Expansion, KernelStats, ncoef

SHAPES = ("cubic", "rect")
CENTER_MODES = ("geometric", "com")


# ----------------------------------------------------------------------------
# build cores
# ----------------------------------------------------------------------------

@njit(cache=True)
def _build_rec(keys, s, e, level, key, ncrit, allow_big, cursor, cap,
               children, parent, levels, keyarr, starts, ends, sub_end, flags,
               parent_idx):
    me = cursor[0]
    if me >= cap:
        flags[0] = 1  # out of cell capacity; caller reallocates and retries
        return -1
    cursor[0] = me + 1
    levels[me] = level
    keyarr[me] = key
    starts[me] = s
    ends[me] = e
    parent[me] = parent_idx
    if e - s <= ncrit or level == MAX_LEVEL:
        if e - s > ncrit and not allow_big:
            flags[1] = 1  # would need level 22
        sub_end[me] = cursor[0]
        return me
    shift = np.uint64(3 * (MAX_LEVEL - level - 1))
    lo = s
    for oct in range(8):
        ckey = (key << np.uint64(3)) | np.uint64(oct)
        upper = (ckey + np.uint64(1)) << shift
        hi = lo + np.searchsorted(keys[lo:e], upper, side="left")
        if hi > lo:
            ci = _build_rec(keys, lo, hi, level + 1, ckey, ncrit, allow_big,
                            cursor, cap, children, parent, levels, keyarr,
                            starts, ends, sub_end, flags, me)
            if flags[0] != 0:
                return -1
            children[me, oct] = ci
        lo = hi
    sub_end[me] = cursor[0]
    return me


@njit(cache=True)
def _fill_geometry(levels, keyarr, starts, ends, x, y, z, q,
                   r0, r1, r2, root_size, rect, com,
                   lo, hi, ctr, bmax, rmax):
    ncells = levels.shape[0]
    for c in range(ncells):
        lvl = levels[c]
        size = root_size / (1 << lvl)
        full = keyarr[c] << np.uint64(3 * (MAX_LEVEL - lvl))
        ix = np.float64(_compact21_u64(full) >> np.uint64(MAX_LEVEL - lvl))
        iy = np.float64(_compact21_u64(full >> np.uint64(1)) >> np.uint64(MAX_LEVEL - lvl))
        iz = np.float64(_compact21_u64(full >> np.uint64(2)) >> np.uint64(MAX_LEVEL - lvl))
        lo[c, 0] = r0 + ix * size
        lo[c, 1] = r1 + iy * size
        lo[c, 2] = r2 + iz * size
        hi[c, 0] = lo[c, 0] + size
        hi[c, 1] = lo[c, 1] + size
        hi[c, 2] = lo[c, 2] + size
        s = starts[c]
        e = ends[c]
        if rect:
            x0 = x[s]
            x1 = x[s]
            y0 = y[s]
            y1 = y[s]
            z0 = z[s]
            z1 = z[s]
            for j in range(s + 1, e):
                if x[j] < x0:
                    x0 = x[j]
                if x[j] > x1:
                    x1 = x[j]
                if y[j] < y0:
                    y0 = y[j]
                if y[j] > y1:
                    y1 = y[j]
                if z[j] < z0:
                    z0 = z[j]
                if z[j] > z1:
                    z1 = z[j]
            lo[c, 0] = x0
            lo[c, 1] = y0
            lo[c, 2] = z0
            hi[c, 0] = x1
            hi[c, 1] = y1
            hi[c, 2] = z1
        if com:
            qs = 0.0
            cx = 0.0
            cy = 0.0
            cz = 0.0
            for j in range(s, e):
                qs += q[j]
                cx += q[j] * x[j]
                cy += q[j] * y[j]
                cz += q[j] * z[j]
            if qs != 0.0:
                ctr[c, 0] = cx / qs
                ctr[c, 1] = cy / qs
                ctr[c, 2] = cz / qs
            else:
                ctr[c, 0] = 0.5 * (lo[c, 0] + hi[c, 0])
                ctr[c, 1] = 0.5 * (lo[c, 1] + hi[c, 1])
                ctr[c, 2] = 0.5 * (lo[c, 2] + hi[c, 2])
        else:
            ctr[c, 0] = 0.5 * (lo[c, 0] + hi[c, 0])
            ctr[c, 1] = 0.5 * (lo[c, 1] + hi[c, 1])
            ctr[c, 2] = 0.5 * (lo[c, 2] + hi[c, 2])
        b2 = 0.0
        for j in range(s, e):
            dx = x[j] - ctr[c, 0]
            dy = y[j] - ctr[c, 1]
            dz = z[j] - ctr[c, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 > b2:
                b2 = d2
        bmax[c] = np.sqrt(b2)
        ax = max(abs(lo[c, 0] - ctr[c, 0]), abs(hi[c, 0] - ctr[c, 0]))
        ay = max(abs(lo[c, 1] - ctr[c, 1]), abs(hi[c, 1] - ctr[c, 1]))
        az = max(abs(lo[c, 2] - ctr[c, 2]), abs(hi[c, 2] - ctr[c, 2]))
        rmax[c] = np.sqrt(ax * ax + ay * ay + az * az)


@njit(cache=True, nogil=True)
def _upward(children, starts, ends, leaf, ctr, x, y, z, q, p, M):
    ncells = children.shape[0]
    for c in range(ncells - 1, -1, -1):
        if leaf[c]:
            _t._p2m(x, y, z, q, starts[c], ends[c], ctr[c, 0], ctr[c, 1], ctr[c, 2], p, M[c])
        else:
            for o in range(8):
                ch = children[c, o]
                if ch >= 0:
                    _t._m2m(M[ch], ctr[ch, 0] - ctr[c, 0], ctr[ch, 1] - ctr[c, 1],
                            ctr[ch, 2] - ctr[c, 2], p, M[c])


@njit(cache=True, nogil=True)
def _downward(children, starts, ends, leaf, ctr, x, y, z, phi, fx, fy, fz, p, L):
    ncells = children.shape[0]
    for c in range(ncells):
        if leaf[c]:
            _t._l2p(L[c], ctr[c, 0], ctr[c, 1], ctr[c, 2], p,
                    x, y, z, phi, fx, fy, fz, starts[c], ends[c])
        else:
            for o in range(8):
                ch = children[c, o]
                if ch >= 0:
                    _t._l2l(L[c], ctr[ch, 0] - ctr[c, 0], ctr[ch, 1] - ctr[c, 1],
                            ctr[ch, 2] - ctr[c, 2], p, L[ch])


# ----------------------------------------------------------------------------
# tree container
# ----------------------------------------------------------------------------

class Cell:
    """Lightweight view of one tree cell (index into the SoA arrays)."""

    __slots__ = ("tree", "index")

    def __init__(self, tree: "Tree", index: int):
        self.tree = tree
        self.index = int(index)

    @property
    def level(self) -> int:
        return int(self.tree.cell_level[self.index])

    @property
    def key(self) -> MortonKey:
        return MortonKey(int(self.tree.cell_key[self.index]), self.level)

    @property
    def start(self) -> int:
        return int(self.tree.cell_start[self.index])

    @property
    def end(self) -> int:
        return int(self.tree.cell_end[self.index])

    @property
    def nbodies(self) -> int:
        return self.end - self.start

    @property
    def is_leaf(self) -> bool:
        return bool(self.tree.cell_leaf[self.index])

    @property
    def parent(self) -> "Cell | None":
        p = int(self.tree.cell_parent[self.index])
        return None if p < 0 else Cell(self.tree, p)

    @property
    def children(self) -> list["Cell"]:
        row = self.tree.cell_children[self.index]
        return [Cell(self.tree, int(c)) for c in row if c >= 0]

    @property
    def bounds(self) -> Aabb:
        return Aabb(self.tree.cell_lo[self.index], self.tree.cell_hi[self.index])

    @property
    def center(self) -> np.ndarray:
        return self.tree.cell_center[self.index].copy()

    @property
    def bmax(self) -> float:
        return float(self.tree.cell_bmax[self.index])

    @property
    def rmax(self) -> float:
        return float(self.tree.cell_rmax[self.index])

    @property
    def multipole(self) -> Expansion | None:
        if self.tree.multipole is None:
            return None
        return Expansion(self.tree.p, self.tree.multipole[self.index].copy())

    @property
    def local(self) -> Expansion | None:
        if self.tree.local is None:
            return None
        return Expansion(self.tree.p, self.tree.local[self.index].copy())

    def bodies(self) -> ParticleSet:
        return self.tree.bodies.view(self.start, self.end)

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else "cell"
        return f"<{kind} #{self.index} level={self.level} bodies=[{self.start},{self.end})>"


@dataclass
class Tree:
    """Adaptive octree over a Morton-ordered copy of the input bodies.

    ``permutation[i]`` is the original index of tree body ``i``.  Expansion
    storage (``multipole``/``local``) is attached by :func:`upward_pass` and
    the evaluators; ``p`` records the order they were built at.
    """

    bodies: ParticleSet
    permutation: np.ndarray
    ncrit: int
    shape: str
    center_mode: str
    root_box: Aabb
    cell_children: np.ndarray
    cell_parent: np.ndarray
    cell_level: np.ndarray
    cell_key: np.ndarray
    cell_start: np.ndarray
    cell_end: np.ndarray
    cell_sub_end: np.ndarray
    cell_lo: np.ndarray
    cell_hi: np.ndarray
    cell_center: np.ndarray
    cell_bmax: np.ndarray
    cell_rmax: np.ndarray
    cell_leaf: np.ndarray
    build_time: float = 0.0
    p: int | None = None
    multipole: np.ndarray | None = None
    local: np.ndarray | None = None
    upward_time: float = field(default=0.0, compare=False)

    @property
    def n(self) -> int:
        return self.bodies.n

    @property
    def ncells(self) -> int:
        return self.cell_level.shape[0]

    @property
    def nleaves(self) -> int:
        return int(self.cell_leaf.sum())

    @property
    def depth(self) -> int:
        return int(self.cell_level.max())

    @property
    def root(self) -> Cell:
        return Cell(self, 0)

    def cell(self, index: int) -> Cell:
        if not 0 <= index < self.ncells:
            raise IndexError(f"cell index {index} out of range 0..{self.ncells - 1}")
        return Cell(self, index)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.cell_leaf)

    def body_count(self, index: int) -> int:
        return int(self.cell_end[index] - self.cell_start[index])

    def reset_accumulators(self) -> None:
        self.bodies.reset_accumulators()
        self.local = None

    def results_in_input_order(self) -> ParticleSet:
        """Copy of the bodies (with accumulators) in the caller's ordering."""
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.permutation] = np.arange(self.n)
        return self.bodies.permuted(inv)

    def stats(self) -> dict:
        leaf_sizes = (self.cell_end - self.cell_start)[self.cell_leaf]
        per_level = np.bincount(self.cell_level, minlength=self.depth + 1)
        return {
            "n": self.n,
            "ncells": self.ncells,
            "nleaves": self.nleaves,
            "depth": self.depth,
            "ncrit": self.ncrit,
            "shape": self.shape,
            "center_mode": self.center_mode,
            "cells_per_level": per_level.tolist(),
            "leaf_occupancy": {
                "min": int(leaf_sizes.min()),
                "max": int(leaf_sizes.max()),
                "mean": float(leaf_sizes.mean()),
            },
        }


def build_tree(ps: ParticleSet, ncrit: int = 30, shape: str = "cubic",
               center_mode: str = "geometric",
               allow_oversized_leaves: bool = False) -> Tree:
    """Build the adaptive octree for ``ps``.

    The input set is not modified; the tree works on a Morton-ordered copy.
    Raises ValueError for an empty set, bad options, or when more than
    ``ncrit`` bodies land on one depth-21 grid cell (typically coincident
    points) and ``allow_oversized_leaves`` is off.
    """
    t0 = time.perf_counter()
    if shape not in SHAPES:
        raise ValueError(f"unknown cell shape {shape!r}: expected one of {SHAPES}")
    if center_mode not in CENTER_MODES:
        raise ValueError(f"unknown center mode {center_mode!r}: expected one of {CENTER_MODES}")
    if ncrit < 1:
        raise ValueError(f"ncrit must be >= 1, got {ncrit}")
    bounds = compute_bounds(ps)  # raises on empty set
    size = float(bounds.extent.max())
    if size == 0.0:
        size = 1.0
    cube = Aabb(bounds.lo, bounds.lo + size)
    inv_h = (1 << MAX_LEVEL) / size

    keys = _encode_points(ps.x, ps.y, ps.z, cube.lo[0], cube.lo[1], cube.lo[2], inv_h)
    order = np.argsort(keys, kind="stable")
    keys = np.ascontiguousarray(keys[order])
    bodies = ps.permuted(order)
    bodies.reset_accumulators()

    n = ps.n
    cap = max(64, 8 * (n // max(1, ncrit) + 1))
    while True:
        children = np.full((cap, 8), -1, dtype=np.int64)
        parent = np.full(cap, -1, dtype=np.int64)
        levels = np.zeros(cap, dtype=np.int64)
        keyarr = np.zeros(cap, dtype=np.uint64)
        starts = np.zeros(cap, dtype=np.int64)
        ends = np.zeros(cap, dtype=np.int64)
        sub_end = np.zeros(cap, dtype=np.int64)
        cursor = np.zeros(1, dtype=np.int64)
        flags = np.zeros(2, dtype=np.int64)
        _build_rec(keys, 0, n, 0, np.uint64(0), ncrit, allow_oversized_leaves,
                   cursor, cap, children, parent, levels, keyarr, starts, ends,
                   sub_end, flags, -1)
        if flags[0]:
            cap *= 4
            continue
        break
    if flags[1]:
        raise ValueError(
            f"max depth exceeded: more than ncrit={ncrit} bodies share one depth-{MAX_LEVEL} "
            "grid cell (pass allow_oversized_leaves=True to keep them in one leaf)"
        )
    ncells = int(cursor[0])
    children = np.ascontiguousarray(children[:ncells])
    parent = parent[:ncells]
    levels = levels[:ncells]
    keyarr = keyarr[:ncells]
    starts = starts[:ncells]
    ends = ends[:ncells]
    sub_end = sub_end[:ncells]
    leaf = np.ascontiguousarray((children < 0).all(axis=1))

    lo = np.empty((ncells, 3))
    hi = np.empty((ncells, 3))
    ctr = np.empty((ncells, 3))
    bmax = np.empty(ncells)
    rmax = np.empty(ncells)
    _fill_geometry(levels, keyarr, starts, ends,
                   bodies.x, bodies.y, bodies.z, bodies.q,
                   cube.lo[0], cube.lo[1], cube.lo[2], size,
                   shape == "rect", center_mode == "com",
                   lo, hi, ctr, bmax, rmax)

    tree = Tree(
        bodies=bodies, permutation=order.astype(np.int64), ncrit=ncrit,
        shape=shape, center_mode=center_mode, root_box=cube,
        cell_children=children, cell_parent=parent, cell_level=levels,
        cell_key=keyarr, cell_start=starts, cell_end=ends, cell_sub_end=sub_end,
        cell_lo=lo, cell_hi=hi, cell_center=ctr, cell_bmax=bmax, cell_rmax=rmax,
        cell_leaf=leaf,
    )
    tree.build_time = time.perf_counter() - t0
    return tree


def upward_pass(tree: Tree, p: int, stats: KernelStats | None = None) -> None:
    """P2M at the leaves, M2M up to the root; attaches ``tree.multipole``."""
    if not 1 <= p <= _t.TMAX:
        raise ValueError(f"expansion order {p} outside supported range 1..{_t.TMAX}")
    t0 = time.perf_counter()
    M = np.zeros((tree.ncells, ncoef(p)))
    b = tree.bodies
    _upward(tree.cell_children, tree.cell_start, tree.cell_end, tree.cell_leaf,
            tree.cell_center, b.x, b.y, b.z, b.q, p, M)
    tree.multipole = M
    tree.p = p
    tree.local = None
    tree.upward_time = time.perf_counter() - t0
    if stats is not None:
        stats.p2m_calls += tree.nleaves
        stats.m2m_calls += int((tree.cell_children >= 0).sum())


def downward_pass(tree: Tree, stats: KernelStats | None = None) -> None:
    """L2L down the tree, L2P into the leaf bodies.

    Requires local expansions populated by a traversal (``tree.local``).
    """
    if tree.local is None or tree.p is None:
        raise ValueError("local expansions not populated; run a traversal first")
    b = tree.bodies
    _downward(tree.cell_children, tree.cell_start, tree.cell_end, tree.cell_leaf,
              tree.cell_center, b.x, b.y, b.z, b.phi, b.fx, b.fy, b.fz,
              tree.p, tree.local)
    if stats is not None:
        stats.l2l_calls += int((tree.cell_children >= 0).sum())
        stats.l2p_calls += tree.nleaves


def check_invariants(tree: Tree) -> None:
    """Raise ValueError on any violated structural invariant (test helper)."""
    b = tree.bodies
    if tree.cell_start[0] != 0 or tree.cell_end[0] != tree.n:
        raise ValueError("root does not span all bodies")
    for c in range(tree.ncells):
        s, e = tree.cell_start[c], tree.cell_end[c]
        if e <= s:
            raise ValueError(f"cell {c} is empty")
        if tree.cell_level[c] > MAX_LEVEL:
            raise ValueError(f"cell {c} deeper than {MAX_LEVEL}")
        kids = tree.cell_children[c][tree.cell_children[c] >= 0]
        if tree.cell_leaf[c] != (kids.size == 0):
            raise ValueError(f"cell {c} leaf flag inconsistent")
        if kids.size:
            pos = s
            for ch in kids:
                if tree.cell_start[ch] != pos:
                    raise ValueError(f"children of cell {c} do not partition its range")
                pos = tree.cell_end[ch]
                if tree.cell_parent[ch] != c:
                    raise ValueError(f"cell {ch} has wrong parent")
            if pos != e:
                raise ValueError(f"children of cell {c} do not cover its range")
        eps = 1e-12 * max(1.0, float(tree.root_box.extent.max()))
        for j in range(s, e):
            if not (tree.cell_lo[c, 0] - eps <= b.x[j] <= tree.cell_hi[c, 0] + eps
                    and tree.cell_lo[c, 1] - eps <= b.y[j] <= tree.cell_hi[c, 1] + eps
                    and tree.cell_lo[c, 2] - eps <= b.z[j] <= tree.cell_hi[c, 2] + eps):
                raise ValueError(f"body {j} outside bounds of cell {c}")
        d = np.sqrt((b.x[s:e] - tree.cell_center[c, 0]) ** 2
                    + (b.y[s:e] - tree.cell_center[c, 1]) ** 2
                    + (b.z[s:e] - tree.cell_center[c, 2]) ** 2)
        if d.max() > tree.cell_bmax[c] + 1e-12:
            raise ValueError(f"bmax of cell {c} underestimates body distance")
