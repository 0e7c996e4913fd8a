"""Horizontal tree traversals: treecode, interaction lists, dual tree.

Three strategies produce the same physics with different far-field plumbing:

* ``treecode``  walks the source tree once per target leaf and applies
  moments directly to bodies (M2P) wherever the acceptance criterion holds.
* ``listfmm``   builds the classic level-wise interaction lists on a cubic
  tree: well-separated same-level pairs (children of the parent's
  neighborhood that are not themselves adjacent) go through M2L, and each
  leaf runs P2P against its adjacent leaves.  On a uniform tree this is the
  textbook 189-cell far list and 26+self near list; on an adaptive tree the
  near list also picks up coarser leaves adjacent to one of the leaf's
  ancestors, which keeps the covered-pair set exact without extra kernels.
  The acceptance criterion plays no role here.
* ``dualtree``  traverses (target, source) pairs simultaneously, splitting
  whichever cell has the larger ``rmax`` (ties split the target, a leaf
  forces the other side open), testing the acceptance criterion on the way.

Work is collected into explicit kernel-call lists before execution, which
(a) gives per-kernel wall times, (b) makes thread scheduling irrelevant to
the floating-point result.  Threading partitions the *targets*: every task
owns a disjoint set of target cells/bodies, so writes never race and the
result is bitwise identical for any thread count.  For the dual traversal
the partition is the set of maximal subtrees holding fewer than
``task_grain`` bodies; pairs whose target lies above that frontier are
handled by a sequential driver, everything below is bucketed per subtree.

``mutual=True`` (dual tree only, single shared tree) evaluates each
unordered pair once with symmetric updates.  A mutual pair straddling two
target partitions is demoted to two directed pairs, so the mutual call
counts — unlike the directed ones — may vary with ``task_grain``.  The
treecode and list strategies are target-driven and ignore the flag.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _taylor as _t
from ._taylor import OFFSET as _OFFSET
from ._taylor import P2P_FLOPS_PER_PAIR as _FLOPS_PER_PAIR
from .geometry import _compact21_u64, _spread21_u64
from .kernels import KernelStats, ncoef
from .mac import MacConfig
from .tree import Tree, downward_pass, upward_pass

STRATEGIES = ("treecode", "listfmm", "dualtree")
REPORT_SCHEMA = "fmmkit-report-v1"


# ----------------------------------------------------------------------------
# configuration and report
# ----------------------------------------------------------------------------

@dataclass
class EvalConfig:
    """Knobs of one evaluation run (tree parameters live on the tree)."""

    strategy: str = "dualtree"
    mac: MacConfig = field(default_factory=lambda: MacConfig("fmm", 0.6))
    p: int = 4
    mutual: bool = False
    task_grain: int = 5000
    use_rsqrt: bool = False

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}: expected one of {STRATEGIES}")
        if not isinstance(self.mac, MacConfig):
            raise TypeError("mac must be a MacConfig")
        if not 1 <= self.p <= _t.TMAX:
            raise ValueError(f"expansion order {self.p} outside supported range 1..{_t.TMAX}")
        if self.task_grain < 1:
            raise ValueError(f"task_grain must be >= 1, got {self.task_grain}")


@dataclass
class EvalReport:
    """Outcome of one evaluation: phase timings, kernel counters, metadata."""

    strategy: str
    n: int
    n_sources: int
    p: int
    mac_kind: str
    theta: float
    mutual: bool
    threads: int
    task_grain: int
    stats: KernelStats
    build_time: float
    upward_time: float
    traversal_time: float
    downward_time: float
    achieved_error: float | None = None
    trace: list | None = None

    @property
    def total_time(self) -> float:
        return self.build_time + self.upward_time + self.traversal_time + self.downward_time

    def to_dict(self) -> dict:
        """JSON-friendly view; wall times in whole milliseconds."""
        counts = {k: v for k, v in self.stats.as_dict().items() if k != "times"}
        return {
            "schema": REPORT_SCHEMA,
            "params": {
                "strategy": self.strategy,
                "n": self.n,
                "n_sources": self.n_sources,
                "p": self.p,
                "mac": self.mac_kind,
                "theta": self.theta,
                "mutual": self.mutual,
                "threads": self.threads,
                "task_grain": self.task_grain,
            },
            "counts": counts,
            "times_ms": {
                "build": int(round(self.build_time * 1e3)),
                "upward": int(round(self.upward_time * 1e3)),
                "traversal": int(round(self.traversal_time * 1e3)),
                "downward": int(round(self.downward_time * 1e3)),
                "total": int(round(self.total_time * 1e3)),
            },
            "kernel_times_ms": {k: int(round(v * 1e3)) for k, v in sorted(self.stats.times.items())},
            "achieved_error": self.achieved_error,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


# ----------------------------------------------------------------------------
# jit cores
# ----------------------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _mac_ok(kind, th2, dx, dy, dz, bt, bs, rs):
    """Squared-form acceptance test; kind: 0=bh, 1=bmax, 2=fmm."""
    r2 = dx * dx + dy * dy + dz * dz
    if r2 == 0.0:
        return False
    if kind == 0:
        s = 2.0 * rs
    elif kind == 1:
        s = bs
    else:
        s = bt + bs
    return s * s < th2 * r2


@njit(cache=True, nogil=True)
def _collect_units(units, childA, leafA, ctrA, bmaxA, rmaxA,
                   childB, leafB, ctrB, bmaxB, rmaxB,
                   kind, th2, m2l_t, m2l_s, m2l_mut, p2p_t, p2p_s, p2p_mut,
                   stack, out):
    """Dual traversal of the given (target, source, mutual) root pairs.

    Appends kernel-call entries up to list capacity but keeps counting past
    it, so the caller can retry with exact sizes.  out = (n_m2l, n_p2p, err)
    with err 0=ok, 1=list overflow, 2=stack overflow (abort).
    """
    nm = 0
    npp = 0
    err = 0
    capm = m2l_t.shape[0]
    capp = p2p_t.shape[0]
    caps = stack.shape[0]
    for u in range(units.shape[0]):
        mut = units[u, 2] != 0
        sp = 0
        stack[0, 0] = units[u, 0]
        stack[0, 1] = units[u, 1]
        while sp >= 0:
            a = stack[sp, 0]
            b = stack[sp, 1]
            sp -= 1
            la = leafA[a]
            lb = leafB[b]
            if la and lb:
                if npp < capp:
                    p2p_t[npp] = a
                    p2p_s[npp] = b
                    p2p_mut[npp] = 1 if mut else 0
                else:
                    err = 1
                npp += 1
                continue
            dx = ctrA[a, 0] - ctrB[b, 0]
            dy = ctrA[a, 1] - ctrB[b, 1]
            dz = ctrA[a, 2] - ctrB[b, 2]
            ok = _mac_ok(kind, th2, dx, dy, dz, bmaxA[a], bmaxB[b], rmaxB[b])
            if ok and mut:
                # symmetric use needs both directions to pass
                ok = _mac_ok(kind, th2, dx, dy, dz, bmaxB[b], bmaxA[a], rmaxA[a])
            if ok:
                if nm < capm:
                    m2l_t[nm] = a
                    m2l_s[nm] = b
                    m2l_mut[nm] = 1 if mut else 0
                else:
                    err = 1
                nm += 1
                continue
            if sp + 40 >= caps:
                out[0] = nm
                out[1] = npp
                out[2] = 2
                return
            if la:
                for o in range(8):
                    ch = childB[b, o]
                    if ch >= 0:
                        sp += 1
                        stack[sp, 0] = a
                        stack[sp, 1] = ch
            elif lb:
                for o in range(8):
                    ch = childA[a, o]
                    if ch >= 0:
                        sp += 1
                        stack[sp, 0] = ch
                        stack[sp, 1] = b
            elif mut and a == b:
                for i in range(8):
                    ci = childA[a, i]
                    if ci < 0:
                        continue
                    sp += 1
                    stack[sp, 0] = ci
                    stack[sp, 1] = ci
                    for j in range(i + 1, 8):
                        cj = childA[a, j]
                        if cj < 0:
                            continue
                        sp += 1
                        stack[sp, 0] = ci
                        stack[sp, 1] = cj
            elif rmaxA[a] >= rmaxB[b]:
                for o in range(8):
                    ch = childA[a, o]
                    if ch >= 0:
                        sp += 1
                        stack[sp, 0] = ch
                        stack[sp, 1] = b
            else:
                for o in range(8):
                    ch = childB[b, o]
                    if ch >= 0:
                        sp += 1
                        stack[sp, 0] = a
                        stack[sp, 1] = ch
    out[0] = nm
    out[1] = npp
    out[2] = err


@njit(cache=True, nogil=True)
def _collect_treecode(leaf_ids, li0, li1, ctrA, bmaxA,
                      childB, leafB, ctrB, bmaxB, rmaxB,
                      kind, th2, m2p_t, m2p_s, p2p_t, p2p_s, stack, out):
    """Per-target-leaf walk of the source tree (acceptance first, then leaf)."""
    nm = 0
    npp = 0
    err = 0
    capm = m2p_t.shape[0]
    capp = p2p_t.shape[0]
    caps = stack.shape[0]
    for li in range(li0, li1):
        t = leaf_ids[li]
        sp = 0
        stack[0] = 0
        while sp >= 0:
            c = stack[sp]
            sp -= 1
            dx = ctrA[t, 0] - ctrB[c, 0]
            dy = ctrA[t, 1] - ctrB[c, 1]
            dz = ctrA[t, 2] - ctrB[c, 2]
            if _mac_ok(kind, th2, dx, dy, dz, bmaxA[t], bmaxB[c], rmaxB[c]):
                if nm < capm:
                    m2p_t[nm] = t
                    m2p_s[nm] = c
                else:
                    err = 1
                nm += 1
            elif leafB[c]:
                if npp < capp:
                    p2p_t[npp] = t
                    p2p_s[npp] = c
                else:
                    err = 1
                npp += 1
            else:
                if sp + 9 >= caps:
                    out[0] = nm
                    out[1] = npp
                    out[2] = 2
                    return
                for o in range(8):
                    ch = childB[c, o]
                    if ch >= 0:
                        sp += 1
                        stack[sp] = ch
    out[0] = nm
    out[1] = npp
    out[2] = err


@njit(cache=True, nogil=True, inline="always")
def _interleave(ix, iy, iz):
    return (_spread21_u64(np.uint64(ix))
            | (_spread21_u64(np.uint64(iy)) << np.uint64(1))
            | (_spread21_u64(np.uint64(iz)) << np.uint64(2)))


@njit(cache=True, nogil=True, inline="always")
def _lookup(sorted_keys, lo, hi, key):
    """Binary search for key in sorted_keys[lo:hi]; position or -1.

    The upper bound is kept so a miss cannot match the next segment (the
    same key value occurs once per level).
    """
    hi0 = hi
    while lo < hi:
        mid = (lo + hi) >> 1
        if sorted_keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < hi0 and sorted_keys[lo] == key:
        return lo
    return -1


@njit(cache=True, nogil=True)
def _collect_vlist(levels, keyarr, parent, children,
                   sorted_cells, sorted_keys, level_off,
                   c0, c1, m2l_t, m2l_s, out):
    """Well-separated same-level pairs for target cells [c0, c1).

    Candidates are the children of the parent's 3x3x3 neighborhood; pairs
    whose grid indices differ by more than one in any axis are kept.
    """
    nm = 0
    err = 0
    capm = m2l_t.shape[0]
    for c in range(c0, c1):
        lvl = levels[c]
        if lvl == 0:
            continue
        key = keyarr[c]
        ix = np.int64(_compact21_u64(key))
        iy = np.int64(_compact21_u64(key >> np.uint64(1)))
        iz = np.int64(_compact21_u64(key >> np.uint64(2)))
        pk = keyarr[parent[c]]
        px = np.int64(_compact21_u64(pk))
        py = np.int64(_compact21_u64(pk >> np.uint64(1)))
        pz = np.int64(_compact21_u64(pk >> np.uint64(2)))
        plvl = lvl - 1
        ng = np.int64(1) << plvl
        for dzo in range(-1, 2):
            jz = pz + dzo
            if jz < 0 or jz >= ng:
                continue
            for dyo in range(-1, 2):
                jy = py + dyo
                if jy < 0 or jy >= ng:
                    continue
                for dxo in range(-1, 2):
                    jx = px + dxo
                    if jx < 0 or jx >= ng:
                        continue
                    pos = _lookup(sorted_keys, level_off[plvl], level_off[plvl + 1],
                                  _interleave(jx, jy, jz))
                    if pos < 0:
                        continue
                    nc = sorted_cells[pos]
                    for o in range(8):
                        ch = children[nc, o]
                        if ch < 0:
                            continue
                        ck = keyarr[ch]
                        ddx = np.int64(_compact21_u64(ck)) - ix
                        ddy = np.int64(_compact21_u64(ck >> np.uint64(1))) - iy
                        ddz = np.int64(_compact21_u64(ck >> np.uint64(2))) - iz
                        if -1 <= ddx <= 1 and -1 <= ddy <= 1 and -1 <= ddz <= 1:
                            continue  # adjacent or self: near field
                        if nm < capm:
                            m2l_t[nm] = c
                            m2l_s[nm] = ch
                        else:
                            err = 1
                        nm += 1
    out[0] = nm
    out[1] = 0
    out[2] = err


@njit(cache=True, nogil=True)
def _collect_ulist(levels, keyarr, leaf, sub_end,
                   sorted_cells, sorted_keys, level_off,
                   leaf_ids, li0, li1, p2p_t, p2p_s, out):
    """Near-field partners for target leaves [li0, li1) of the leaf array.

    Own-level neighborhood cells contribute themselves (leaves) or all
    descendant leaves; each coarser ancestor's neighborhood contributes its
    leaf cells.  Together with the well-separated lists this covers every
    body pair exactly once.
    """
    npp = 0
    err = 0
    capp = p2p_t.shape[0]
    for li in range(li0, li1):
        t = leaf_ids[li]
        lvl = levels[t]
        key = keyarr[t]
        ix = np.int64(_compact21_u64(key))
        iy = np.int64(_compact21_u64(key >> np.uint64(1)))
        iz = np.int64(_compact21_u64(key >> np.uint64(2)))
        ng = np.int64(1) << np.int64(lvl)
        for dzo in range(-1, 2):
            jz = iz + dzo
            if jz < 0 or jz >= ng:
                continue
            for dyo in range(-1, 2):
                jy = iy + dyo
                if jy < 0 or jy >= ng:
                    continue
                for dxo in range(-1, 2):
                    jx = ix + dxo
                    if jx < 0 or jx >= ng:
                        continue
                    pos = _lookup(sorted_keys, level_off[lvl], level_off[lvl + 1],
                                  _interleave(jx, jy, jz))
                    if pos < 0:
                        continue
                    c = sorted_cells[pos]
                    if leaf[c]:
                        if npp < capp:
                            p2p_t[npp] = t
                            p2p_s[npp] = c
                        else:
                            err = 1
                        npp += 1
                    else:
                        # subtree is contiguous: sweep its descendant leaves
                        for d in range(c, sub_end[c]):
                            if leaf[d]:
                                if npp < capp:
                                    p2p_t[npp] = t
                                    p2p_s[npp] = d
                                else:
                                    err = 1
                                npp += 1
        akey = key
        for lv in range(lvl - 1, 0, -1):
            akey = akey >> np.uint64(3)
            ax = np.int64(_compact21_u64(akey))
            ay = np.int64(_compact21_u64(akey >> np.uint64(1)))
            az = np.int64(_compact21_u64(akey >> np.uint64(2)))
            ngl = np.int64(1) << np.int64(lv)
            for dzo in range(-1, 2):
                jz = az + dzo
                if jz < 0 or jz >= ngl:
                    continue
                for dyo in range(-1, 2):
                    jy = ay + dyo
                    if jy < 0 or jy >= ngl:
                        continue
                    for dxo in range(-1, 2):
                        if dxo == 0 and dyo == 0 and dzo == 0:
                            continue  # the ancestor itself is internal
                        jx = ax + dxo
                        if jx < 0 or jx >= ngl:
                            continue
                        pos = _lookup(sorted_keys, level_off[lv], level_off[lv + 1],
                                      _interleave(jx, jy, jz))
                        if pos < 0:
                            continue
                        c = sorted_cells[pos]
                        if leaf[c]:
                            if npp < capp:
                                p2p_t[npp] = t
                                p2p_s[npp] = c
                            else:
                                err = 1
                            npp += 1
    out[0] = 0
    out[1] = npp
    out[2] = err


@njit(cache=True, nogil=True)
def _exec_m2l(ta, sb, mut, n, ctrA, ctrB, MA, MB, LA, LB, p):
    """Run the collected cell-to-cell conversions; returns local-write count."""
    D = np.empty(_OFFSET[p], dtype=np.float64)
    calls = 0
    for k in range(n):
        a = ta[k]
        b = sb[k]
        dx = ctrA[a, 0] - ctrB[b, 0]
        dy = ctrA[a, 1] - ctrB[b, 1]
        dz = ctrA[a, 2] - ctrB[b, 2]
        if mut[k] != 0:
            _t._m2l_mutual(MA[a], MB[b], dx, dy, dz, p, LA[a], LB[b], D)
            calls += 2
        else:
            _t._m2l(MB[b], dx, dy, dz, p, LA[a], D)
            calls += 1
    return calls


@njit(cache=True, nogil=True)
def _exec_m2p(ta, sb, n, startsA, endsA, x, y, z, phi, fx, fy, fz, ctrB, MB, p):
    D = np.empty(_OFFSET[p + 1], dtype=np.float64)
    for k in range(n):
        t = ta[k]
        s = sb[k]
        _t._m2p(MB[s], ctrB[s, 0], ctrB[s, 1], ctrB[s, 2], p,
                x, y, z, phi, fx, fy, fz, startsA[t], endsA[t], D)
    return n


@njit(cache=True, nogil=True)
def _exec_p2p(ta, sb, mut, n, starts, ends, x, y, z, q, phi, fx, fy, fz,
              use_rsqrt, st):
    """Run collected body-range pairs living on one shared body array."""
    for k in range(n):
        a = ta[k]
        b = sb[k]
        t0 = starts[a]
        t1 = ends[a]
        if mut[k] != 0:
            if a == b:
                _t._p2p_mutual_self(x, y, z, q, phi, fx, fy, fz, t0, t1, use_rsqrt, st)
            else:
                _t._p2p_mutual(x, y, z, q, phi, fx, fy, fz, t0, t1,
                               starts[b], ends[b], use_rsqrt, st)
        else:
            _t._p2p_batched(x, y, z, q, phi, fx, fy, fz, t0, t1,
                            starts[b], ends[b], a == b, use_rsqrt, st)


@njit(cache=True, nogil=True)
def _p2p_cross(xA, yA, zA, phiA, fxA, fyA, fzA, t0, t1,
               xB, yB, zB, qB, s0, s1, use_rsqrt, st):
    """Directed lane-batched sums when targets and sources are distinct sets."""
    pairs = 0
    skipped = 0
    i = t0
    while i < t1:
        w = t1 - i
        if w > 8:
            w = 8
        for j in range(s0, s1):
            xj = xB[j]
            yj = yB[j]
            zj = zB[j]
            qj = qB[j]
            for l in range(w):
                ii = i + l
                dx = xA[ii] - xj
                dy = yA[ii] - yj
                dz = zA[ii] - zj
                r2 = dx * dx + dy * dy + dz * dz
                if r2 == 0.0:
                    skipped += 1
                    continue
                rinv = _t._rinv(r2, use_rsqrt)
                qr = qj * rinv
                qr3 = qr * rinv * rinv
                phiA[ii] += qr
                fxA[ii] += qr3 * dx
                fyA[ii] += qr3 * dy
                fzA[ii] += qr3 * dz
                pairs += 1
        i += w
    st[0] += pairs
    st[1] += skipped
    st[2] += pairs * _FLOPS_PER_PAIR


@njit(cache=True, nogil=True)
def _exec_p2p_cross(ta, sb, n, startsA, endsA, xA, yA, zA, phiA, fxA, fyA, fzA,
                    startsB, endsB, xB, yB, zB, qB, use_rsqrt, st):
    for k in range(n):
        a = ta[k]
        b = sb[k]
        _p2p_cross(xA, yA, zA, phiA, fxA, fyA, fzA, startsA[a], endsA[a],
                   xB, yB, zB, qB, startsB[b], endsB[b], use_rsqrt, st)


# ----------------------------------------------------------------------------
# python-side plumbing
# ----------------------------------------------------------------------------

def _cells_of(t: Tree):
    return (t.cell_children, t.cell_leaf, t.cell_center, t.cell_bmax,
            t.cell_rmax, t.cell_start, t.cell_end)


def _ensure_multipoles(t: Tree, p: int, stats: KernelStats) -> None:
    if t.multipole is None or t.p != p:
        upward_pass(t, p, stats)


def _attach_locals(t: Tree, p: int) -> None:
    if t.p is not None and t.p != p:
        t.multipole = None  # built at a different order; force a rebuild
    t.p = p
    t.local = np.zeros((t.ncells, ncoef(p)))


def _partition_roots(tree: Tree, grain: int) -> np.ndarray:
    """Maximal subtrees with fewer than ``grain`` bodies (leaves included)."""
    roots = []
    stack = [0]
    while stack:
        c = stack.pop()
        if tree.cell_leaf[c] or tree.body_count(c) < grain:
            roots.append(c)
        else:
            stack.extend(int(ch) for ch in tree.cell_children[c] if ch >= 0)
    roots.sort()
    return np.asarray(roots, dtype=np.int64)


def _owner_map(tree: Tree, roots: np.ndarray) -> np.ndarray:
    owner = np.full(tree.ncells, -1, dtype=np.int64)
    for r in roots:
        owner[r:tree.cell_sub_end[r]] = r
    return owner


def _split_is_target(target, source) -> bool | None:
    """Which side of an unresolved pair the dual traversal opens.

    True = target, False = source, None = both sides are leaves.
    """
    if target.is_leaf and source.is_leaf:
        return None
    if target.is_leaf:
        return False
    if source.is_leaf:
        return True
    return target.rmax >= source.rmax


def spawn_policy(target, source, cfg: EvalConfig) -> str:
    """'spawn' when descending this pair opens a target subtree big enough
    (>= ``cfg.task_grain`` bodies) to be worth a parallel task; else 'inline'."""
    side = _split_is_target(target, source)
    if side and target.nbodies >= cfg.task_grain:
        return "spawn"
    return "inline"


def _expand_events(kind: str, ta, sb, mut, n: int, events: list) -> None:
    for k in range(n):
        a = int(ta[k])
        b = int(sb[k])
        events.append((kind, a, b))
        if mut is not None and mut[k] and a != b:
            events.append((kind, b, a))


def _sum_p2p(stats: KernelStats, st: np.ndarray) -> None:
    stats.p2p_pairs += int(st[0])
    stats.p2p_skipped += int(st[1])
    stats.p2p_flops += int(st[2])


def _nchunks(nitems: int, threads: int) -> int:
    if threads <= 1 or nitems <= 1:
        return 1
    return min(nitems, threads * 8)


def _chunk_bounds(nitems: int, nchunks: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, nitems, nchunks + 1).astype(np.int64)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(nchunks)
            if edges[i + 1] > edges[i]]


def _run_tasks(tasks, threads: int) -> list:
    """Run callables, in order when serial; results always in submit order."""
    if threads <= 1 or len(tasks) <= 1:
        return [fn() for fn in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return [f.result() for f in [pool.submit(fn) for fn in tasks]]


# ----------------------------------------------------------------------------
# dual tree
# ----------------------------------------------------------------------------

def _dual_driver(tree: Tree, src: Tree, cfg: EvalConfig, owner: np.ndarray):
    """Sequential traversal above the partition frontier.

    Returns the driver-level conversion events and the per-partition-root
    buckets of (target, source, mutual) traversal units.
    """
    leafA = tree.cell_leaf
    childA = tree.cell_children
    ctrA = tree.cell_center
    bmaxA = tree.cell_bmax
    rmaxA = tree.cell_rmax
    leafB = src.cell_leaf
    childB = src.cell_children
    ctrB = src.cell_center
    bmaxB = src.cell_bmax
    rmaxB = src.cell_rmax
    kind = cfg.mac.code
    th2 = cfg.mac.theta * cfg.mac.theta

    drv_m2l: list[tuple[int, int, int]] = []
    buckets: dict[int, list[tuple[int, int, int]]] = {}
    stack: list[tuple[int, int, bool]] = [(0, 0, cfg.mutual)]
    while stack:
        a, b, mut = stack.pop()
        oa = owner[a]
        if mut:
            ob = owner[b]
            if oa >= 0 and ob >= 0:
                if oa == ob:
                    buckets.setdefault(int(oa), []).append((a, b, 1))
                else:
                    # straddles two target partitions: demote to directed
                    stack.append((a, b, False))
                    stack.append((b, a, False))
                continue
        elif oa >= 0:
            buckets.setdefault(int(oa), []).append((a, b, 0))
            continue
        # at least one side is above the partition, hence internal
        la = bool(leafA[a])
        lb = bool(leafB[b])
        dx = ctrA[a, 0] - ctrB[b, 0]
        dy = ctrA[a, 1] - ctrB[b, 1]
        dz = ctrA[a, 2] - ctrB[b, 2]
        r2 = dx * dx + dy * dy + dz * dz
        th2r2 = th2 * r2
        if r2 > 0.0:
            if kind == 0:
                s = 2.0 * rmaxB[b]
            elif kind == 1:
                s = bmaxB[b]
            else:
                s = bmaxA[a] + bmaxB[b]
            ok = s * s < th2r2
            if ok and mut:
                if kind == 0:
                    s = 2.0 * rmaxA[a]
                elif kind == 1:
                    s = bmaxA[a]
                else:
                    s = bmaxB[b] + bmaxA[a]
                ok = s * s < th2r2
            if ok:
                drv_m2l.append((a, b, 1 if mut else 0))
                continue
        if la:
            for ch in childB[b]:
                if ch >= 0:
                    stack.append((a, int(ch), mut))
        elif lb:
            for ch in childA[a]:
                if ch >= 0:
                    stack.append((int(ch), b, mut))
        elif mut and a == b:
            kids = [int(c) for c in childA[a] if c >= 0]
            for i, ci in enumerate(kids):
                stack.append((ci, ci, True))
                for cj in kids[i + 1:]:
                    stack.append((ci, cj, True))
        elif rmaxA[a] >= rmaxB[b]:
            for ch in childA[a]:
                if ch >= 0:
                    stack.append((int(ch), b, mut))
        else:
            for ch in childB[b]:
                if ch >= 0:
                    stack.append((a, int(ch), mut))
    return drv_m2l, buckets


def _run_unit_bucket(units: np.ndarray, tree: Tree, src: Tree, cfg: EvalConfig,
                     want_trace: bool) -> dict:
    """Collect-then-execute one bucket of traversal units (one task)."""
    childA, leafA, ctrA, bmaxA, rmaxA, startsA, endsA = _cells_of(tree)
    childB, leafB, ctrB, bmaxB, rmaxB, startsB, endsB = _cells_of(src)
    kind = cfg.mac.code
    th2 = cfg.mac.theta * cfg.mac.theta
    same = src is tree

    ncells_t = int(np.sum(tree.cell_sub_end[units[:, 0]] - units[:, 0]))
    capm = max(2048, 64 * ncells_t)
    capp = max(2048, 32 * ncells_t)
    srows = 8192
    t0 = time.perf_counter()
    while True:
        m2l_t = np.empty(capm, dtype=np.int64)
        m2l_s = np.empty(capm, dtype=np.int64)
        m2l_mut = np.empty(capm, dtype=np.uint8)
        p2p_t = np.empty(capp, dtype=np.int64)
        p2p_s = np.empty(capp, dtype=np.int64)
        p2p_mut = np.empty(capp, dtype=np.uint8)
        stack = np.empty((srows, 2), dtype=np.int64)
        out = np.zeros(3, dtype=np.int64)
        _collect_units(units, childA, leafA, ctrA, bmaxA, rmaxA,
                       childB, leafB, ctrB, bmaxB, rmaxB,
                       kind, th2, m2l_t, m2l_s, m2l_mut, p2p_t, p2p_s, p2p_mut,
                       stack, out)
        if out[2] == 2:
            srows *= 4
            continue
        if out[0] > capm or out[1] > capp:
            capm = max(int(out[0]), 1)
            capp = max(int(out[1]), 1)
            continue
        break
    nm = int(out[0])
    npp = int(out[1])
    t1 = time.perf_counter()

    MA = tree.multipole if tree.multipole is not None else src.multipole
    LB = src.local if src.local is not None else tree.local
    calls = _exec_m2l(m2l_t, m2l_s, m2l_mut, nm, ctrA, ctrB,
                      MA, src.multipole, tree.local, LB, cfg.p)
    t2 = time.perf_counter()

    bt = tree.bodies
    st = np.zeros(3, dtype=np.int64)
    if same:
        _exec_p2p(p2p_t, p2p_s, p2p_mut, npp, startsA, endsA,
                  bt.x, bt.y, bt.z, bt.q, bt.phi, bt.fx, bt.fy, bt.fz,
                  cfg.use_rsqrt, st)
    else:
        bs = src.bodies
        _exec_p2p_cross(p2p_t, p2p_s, npp, startsA, endsA,
                        bt.x, bt.y, bt.z, bt.phi, bt.fx, bt.fy, bt.fz,
                        startsB, endsB, bs.x, bs.y, bs.z, bs.q,
                        cfg.use_rsqrt, st)
    t3 = time.perf_counter()

    res = {
        "m2l_calls": int(calls),
        "p2p": st,
        "times": {"list": t1 - t0, "m2l": t2 - t1, "p2p": t3 - t2},
    }
    if want_trace:
        res["m2l_events"] = (m2l_t[:nm].copy(), m2l_s[:nm].copy(), m2l_mut[:nm].copy())
        res["p2p_events"] = (p2p_t[:npp].copy(), p2p_s[:npp].copy(), p2p_mut[:npp].copy())
    return res


def evaluate_dual_tree(tree: Tree, cfg: EvalConfig, *, source_tree: Tree | None = None,
                       threads: int = 1, trace: bool = False) -> EvalReport:
    """Simultaneous traversal of target and source trees (the default)."""
    src = tree if source_tree is None else source_tree
    if cfg.mutual and src is not tree:
        raise ValueError("mutual traversal needs target and source to share one tree")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    stats = KernelStats()
    events: list | None = [] if trace else None

    t0 = time.perf_counter()
    _ensure_multipoles(src, cfg.p, stats)
    tree.bodies.reset_accumulators()
    _attach_locals(tree, cfg.p)
    upward_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    roots = _partition_roots(tree, cfg.task_grain)
    owner = _owner_map(tree, roots)
    drv_m2l, buckets = _dual_driver(tree, src, cfg, owner)

    if drv_m2l:
        arr = np.asarray(drv_m2l, dtype=np.int64)
        ta = np.ascontiguousarray(arr[:, 0])
        sb = np.ascontiguousarray(arr[:, 1])
        mm = np.ascontiguousarray(arr[:, 2]).astype(np.uint8)
        td = time.perf_counter()
        MA = tree.multipole if tree.multipole is not None else src.multipole
        LB = src.local if src.local is not None else tree.local
        calls = _exec_m2l(ta, sb, mm, arr.shape[0],
                          tree.cell_center, src.cell_center,
                          MA, src.multipole, tree.local, LB, cfg.p)
        stats.m2l_calls += int(calls)
        stats.add_time("m2l", time.perf_counter() - td)
        if events is not None:
            _expand_events("m2l", arr[:, 0], arr[:, 1], arr[:, 2], arr.shape[0], events)

    keys = sorted(buckets)
    tasks = [
        (lambda u=np.asarray(buckets[k], dtype=np.int64): _run_unit_bucket(
            u, tree, src, cfg, trace))
        for k in keys
    ]
    for res in _run_tasks(tasks, threads):
        stats.m2l_calls += res["m2l_calls"]
        _sum_p2p(stats, res["p2p"])
        for k, v in res["times"].items():
            stats.add_time(k, v)
        if events is not None:
            mt, ms, mm = res["m2l_events"]
            _expand_events("m2l", mt, ms, mm, len(mt), events)
            pt, ps, pm = res["p2p_events"]
            _expand_events("p2p", pt, ps, pm, len(pt), events)
    traversal_time = time.perf_counter() - t1

    t2 = time.perf_counter()
    downward_pass(tree, stats)
    downward_time = time.perf_counter() - t2

    build = tree.build_time + (src.build_time if src is not tree else 0.0)
    return EvalReport(
        strategy="dualtree", n=tree.n, n_sources=src.n, p=cfg.p,
        mac_kind=cfg.mac.kind, theta=cfg.mac.theta, mutual=cfg.mutual,
        threads=threads, task_grain=cfg.task_grain, stats=stats,
        build_time=build, upward_time=upward_time,
        traversal_time=traversal_time, downward_time=downward_time,
        trace=events,
    )


# ----------------------------------------------------------------------------
# treecode
# ----------------------------------------------------------------------------

def _run_leaf_chunk(tree: Tree, src: Tree, cfg: EvalConfig, leaf_ids: np.ndarray,
                    li0: int, li1: int, want_trace: bool) -> dict:
    childB, leafB, ctrB, bmaxB, rmaxB, startsB, endsB = _cells_of(src)
    kind = cfg.mac.code
    th2 = cfg.mac.theta * cfg.mac.theta
    nleaf = li1 - li0
    capm = max(1024, 256 * nleaf)
    capp = max(1024, 64 * nleaf)
    srows = 8192
    t0 = time.perf_counter()
    while True:
        m2p_t = np.empty(capm, dtype=np.int64)
        m2p_s = np.empty(capm, dtype=np.int64)
        p2p_t = np.empty(capp, dtype=np.int64)
        p2p_s = np.empty(capp, dtype=np.int64)
        stack = np.empty(srows, dtype=np.int64)
        out = np.zeros(3, dtype=np.int64)
        _collect_treecode(leaf_ids, li0, li1, tree.cell_center, tree.cell_bmax,
                          childB, leafB, ctrB, bmaxB, rmaxB,
                          kind, th2, m2p_t, m2p_s, p2p_t, p2p_s, stack, out)
        if out[2] == 2:
            srows *= 4
            continue
        if out[0] > capm or out[1] > capp:
            capm = max(int(out[0]), 1)
            capp = max(int(out[1]), 1)
            continue
        break
    nm = int(out[0])
    npp = int(out[1])
    t1 = time.perf_counter()

    bt = tree.bodies
    _exec_m2p(m2p_t, m2p_s, nm, tree.cell_start, tree.cell_end,
              bt.x, bt.y, bt.z, bt.phi, bt.fx, bt.fy, bt.fz,
              ctrB, src.multipole, cfg.p)
    t2 = time.perf_counter()

    st = np.zeros(3, dtype=np.int64)
    mut = np.zeros(npp, dtype=np.uint8)
    if src is tree:
        _exec_p2p(p2p_t, p2p_s, mut, npp, tree.cell_start, tree.cell_end,
                  bt.x, bt.y, bt.z, bt.q, bt.phi, bt.fx, bt.fy, bt.fz,
                  cfg.use_rsqrt, st)
    else:
        bs = src.bodies
        _exec_p2p_cross(p2p_t, p2p_s, npp, tree.cell_start, tree.cell_end,
                        bt.x, bt.y, bt.z, bt.phi, bt.fx, bt.fy, bt.fz,
                        startsB, endsB, bs.x, bs.y, bs.z, bs.q,
                        cfg.use_rsqrt, st)
    t3 = time.perf_counter()

    res = {
        "m2p_calls": nm,
        "p2p": st,
        "times": {"list": t1 - t0, "m2p": t2 - t1, "p2p": t3 - t2},
    }
    if want_trace:
        res["m2p_events"] = (m2p_t[:nm].copy(), m2p_s[:nm].copy())
        res["p2p_events"] = (p2p_t[:npp].copy(), p2p_s[:npp].copy())
    return res


def evaluate_treecode(tree: Tree, cfg: EvalConfig, *, source_tree: Tree | None = None,
                      threads: int = 1, trace: bool = False) -> EvalReport:
    """Classic one-tree-at-a-time walk; far field lands directly on bodies.

    The walk is target-leaf driven, so ``cfg.mutual`` has no effect here.
    """
    src = tree if source_tree is None else source_tree
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    stats = KernelStats()
    events: list | None = [] if trace else None

    t0 = time.perf_counter()
    _ensure_multipoles(src, cfg.p, stats)
    tree.reset_accumulators()
    upward_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    leaf_ids = tree.leaves()
    bounds = _chunk_bounds(len(leaf_ids), _nchunks(len(leaf_ids), threads))
    tasks = [
        (lambda b=b: _run_leaf_chunk(tree, src, cfg, leaf_ids, b[0], b[1], trace))
        for b in bounds
    ]
    for res in _run_tasks(tasks, threads):
        stats.m2p_calls += res["m2p_calls"]
        _sum_p2p(stats, res["p2p"])
        for k, v in res["times"].items():
            stats.add_time(k, v)
        if events is not None:
            mt, ms = res["m2p_events"]
            _expand_events("m2p", mt, ms, None, len(mt), events)
            pt, ps = res["p2p_events"]
            _expand_events("p2p", pt, ps, None, len(pt), events)
    traversal_time = time.perf_counter() - t1

    build = tree.build_time + (src.build_time if src is not tree else 0.0)
    return EvalReport(
        strategy="treecode", n=tree.n, n_sources=src.n, p=cfg.p,
        mac_kind=cfg.mac.kind, theta=cfg.mac.theta, mutual=cfg.mutual,
        threads=threads, task_grain=cfg.task_grain, stats=stats,
        build_time=build, upward_time=upward_time,
        traversal_time=traversal_time, downward_time=0.0,
        trace=events,
    )


# ----------------------------------------------------------------------------
# interaction lists
# ----------------------------------------------------------------------------

def _level_tables(tree: Tree):
    order = np.lexsort((tree.cell_key, tree.cell_level)).astype(np.int64)
    sorted_keys = np.ascontiguousarray(tree.cell_key[order])
    counts = np.bincount(tree.cell_level, minlength=tree.depth + 1)
    level_off = np.zeros(tree.depth + 2, dtype=np.int64)
    np.cumsum(counts, out=level_off[1:])
    return order, sorted_keys, level_off


def _run_vlist_chunk(tree: Tree, cfg: EvalConfig, tables, c0: int, c1: int,
                     want_trace: bool) -> dict:
    sorted_cells, sorted_keys, level_off = tables
    capm = max(1024, 200 * (c1 - c0))
    t0 = time.perf_counter()
    while True:
        m2l_t = np.empty(capm, dtype=np.int64)
        m2l_s = np.empty(capm, dtype=np.int64)
        out = np.zeros(3, dtype=np.int64)
        _collect_vlist(tree.cell_level, tree.cell_key, tree.cell_parent,
                       tree.cell_children, sorted_cells, sorted_keys, level_off,
                       c0, c1, m2l_t, m2l_s, out)
        if out[0] > capm:
            capm = max(int(out[0]), 1)
            continue
        break
    nm = int(out[0])
    t1 = time.perf_counter()
    mut = np.zeros(nm, dtype=np.uint8)
    calls = _exec_m2l(m2l_t, m2l_s, mut, nm, tree.cell_center, tree.cell_center,
                      tree.multipole, tree.multipole, tree.local, tree.local, cfg.p)
    t2 = time.perf_counter()
    res = {
        "m2l_calls": int(calls),
        "times": {"list": t1 - t0, "m2l": t2 - t1},
    }
    if want_trace:
        res["m2l_events"] = (m2l_t[:nm].copy(), m2l_s[:nm].copy())
    return res


def _run_ulist_chunk(tree: Tree, cfg: EvalConfig, tables, leaf_ids: np.ndarray,
                     li0: int, li1: int, want_trace: bool) -> dict:
    sorted_cells, sorted_keys, level_off = tables
    capp = max(1024, 60 * (li1 - li0))
    t0 = time.perf_counter()
    while True:
        p2p_t = np.empty(capp, dtype=np.int64)
        p2p_s = np.empty(capp, dtype=np.int64)
        out = np.zeros(3, dtype=np.int64)
        _collect_ulist(tree.cell_level, tree.cell_key, tree.cell_leaf,
                       tree.cell_sub_end, sorted_cells, sorted_keys, level_off,
                       leaf_ids, li0, li1, p2p_t, p2p_s, out)
        if out[1] > capp:
            capp = max(int(out[1]), 1)
            continue
        break
    npp = int(out[1])
    t1 = time.perf_counter()
    bt = tree.bodies
    st = np.zeros(3, dtype=np.int64)
    mut = np.zeros(npp, dtype=np.uint8)
    _exec_p2p(p2p_t, p2p_s, mut, npp, tree.cell_start, tree.cell_end,
              bt.x, bt.y, bt.z, bt.q, bt.phi, bt.fx, bt.fy, bt.fz,
              cfg.use_rsqrt, st)
    t2 = time.perf_counter()
    res = {
        "p2p": st,
        "times": {"list": t1 - t0, "p2p": t2 - t1},
    }
    if want_trace:
        res["p2p_events"] = (p2p_t[:npp].copy(), p2p_s[:npp].copy())
    return res


def evaluate_list_fmm(tree: Tree, cfg: EvalConfig, *, source_tree: Tree | None = None,
                      threads: int = 1, trace: bool = False) -> EvalReport:
    """Level-wise interaction lists (adjacency-based; theta plays no role).

    Requires cubic cells so that same-level cells sit on a regular grid;
    evaluates one tree onto itself.  ``cfg.mutual`` has no effect here.
    """
    if source_tree is not None and source_tree is not tree:
        raise ValueError("listfmm evaluates one tree onto itself")
    if tree.shape != "cubic":
        raise ValueError("listfmm requires cubic cells; rebuild the tree with shape='cubic'")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    stats = KernelStats()
    events: list | None = [] if trace else None

    t0 = time.perf_counter()
    _ensure_multipoles(tree, cfg.p, stats)
    tree.bodies.reset_accumulators()
    _attach_locals(tree, cfg.p)
    upward_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    order, sorted_keys, level_off = _level_tables(tree)
    tables = (order, sorted_keys, level_off)
    leaf_ids = tree.leaves()
    vtasks = [
        (lambda b=b: _run_vlist_chunk(tree, cfg, tables, b[0], b[1], trace))
        for b in _chunk_bounds(tree.ncells, _nchunks(tree.ncells, threads))
    ]
    utasks = [
        (lambda b=b: _run_ulist_chunk(tree, cfg, tables, leaf_ids, b[0], b[1], trace))
        for b in _chunk_bounds(len(leaf_ids), _nchunks(len(leaf_ids), threads))
    ]
    for res in _run_tasks(vtasks + utasks, threads):
        if "m2l_calls" in res:
            stats.m2l_calls += res["m2l_calls"]
        if "p2p" in res:
            _sum_p2p(stats, res["p2p"])
        for k, v in res["times"].items():
            stats.add_time(k, v)
        if events is not None:
            if "m2l_events" in res:
                mt, ms = res["m2l_events"]
                _expand_events("m2l", mt, ms, None, len(mt), events)
            if "p2p_events" in res:
                pt, ps = res["p2p_events"]
                _expand_events("p2p", pt, ps, None, len(pt), events)
    traversal_time = time.perf_counter() - t1

    t2 = time.perf_counter()
    downward_pass(tree, stats)
    downward_time = time.perf_counter() - t2

    return EvalReport(
        strategy="listfmm", n=tree.n, n_sources=tree.n, p=cfg.p,
        mac_kind=cfg.mac.kind, theta=cfg.mac.theta, mutual=cfg.mutual,
        threads=threads, task_grain=cfg.task_grain, stats=stats,
        build_time=tree.build_time, upward_time=upward_time,
        traversal_time=traversal_time, downward_time=downward_time,
        trace=events,
    )


# ----------------------------------------------------------------------------
# dispatcher
# ----------------------------------------------------------------------------

_STRATEGY_FNS = {
    "treecode": evaluate_treecode,
    "listfmm": evaluate_list_fmm,
    "dualtree": evaluate_dual_tree,
}


def evaluate_on_tree(tree: Tree, cfg: EvalConfig, *, source_tree: Tree | None = None,
                     threads: int = 1, trace: bool = False) -> EvalReport:
    """Run ``cfg.strategy`` on the tree; results land in ``tree.bodies``."""
    fn = _STRATEGY_FNS[cfg.strategy]
    return fn(tree, cfg, source_tree=source_tree, threads=threads, trace=trace)
