"""Interaction kernels: P2P, the expansion operators and the direct oracle.

Conventions (fixed across the package):

* potential  phi(x_i) = sum_{j != i} q_j / |x_i - x_j|
* force      f(x_i)   = -grad phi = sum_{j != i} q_j (x_i - x_j) / r^3
* an order-p expansion keeps multi-indices with |m| < p
  (p(p+1)(p+2)/6 coefficients, see ``fmmkit._taylor`` for the ordering)
* moments     M_m = sum_j q_j (x_j - c)^m / m!
* locals      phi(y) = sum_n L_n (y - c)^n

Coincident bodies (r = 0) are never evaluated: the pair is skipped and
counted in ``KernelStats.p2p_skipped``.  Flops follow the direct-summation
cost model of 20 per evaluated pair, so ``p2p_flops == 20 * p2p_pairs``
holds by construction and is asserted in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _taylor as _t
from ._taylor import P2P_FLOPS_PER_PAIR, TMAX, ncoef
from .geometry import ParticleSet

__all__ = [
    "Expansion", "KernelStats", "p2p", "direct",
    "p2m", "m2m", "m2l", "l2l", "l2p", "m2p",
    "ncoef", "P2P_FLOPS_PER_PAIR",
]


@dataclass
class Expansion:
    """Truncated Cartesian Taylor expansion (multipole or local).

    ``coeffs`` is ordered graded-lexicographically; ``order`` is the p in
    |m| < p.  The same container backs both moment and local expansions --
    the operators document which they expect.
    """

    order: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        if not 1 <= self.order <= TMAX:
            raise ValueError(f"expansion order {self.order} outside supported range 1..{TMAX}")
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (ncoef(self.order),):
            raise ValueError(
                f"coefficient count {self.coeffs.shape} does not match order {self.order} "
                f"(want {ncoef(self.order)})"
            )

    @classmethod
    def zeros(cls, order: int) -> "Expansion":
        if not 1 <= order <= TMAX:
            raise ValueError(f"expansion order {order} outside supported range 1..{TMAX}")
        return cls(order, np.zeros(ncoef(order)))

    @property
    def monopole(self) -> float:
        return float(self.coeffs[0])

    def copy(self) -> "Expansion":
        return Expansion(self.order, self.coeffs.copy())


@dataclass
class KernelStats:
    """Kernel-call counters and aggregated per-kernel wall times (seconds).

    ``p2p_pairs`` counts directed accumulation events: a mutual evaluation
    of two distinct bodies advances it by two.  ``p2p_flops`` advances by 20
    per counted pair (direct-summation cost model).
    """

    p2p_pairs: int = 0
    p2p_skipped: int = 0
    p2p_flops: int = 0
    m2l_calls: int = 0
    m2p_calls: int = 0
    p2m_calls: int = 0
    m2m_calls: int = 0
    l2l_calls: int = 0
    l2p_calls: int = 0
    times: dict = field(default_factory=dict)

    def add_time(self, key: str, seconds: float) -> None:
        self.times[key] = self.times.get(key, 0.0) + seconds

    def merge(self, other: "KernelStats") -> None:
        self.p2p_pairs += other.p2p_pairs
        self.p2p_skipped += other.p2p_skipped
        self.p2p_flops += other.p2p_flops
        self.m2l_calls += other.m2l_calls
        self.m2p_calls += other.m2p_calls
        self.p2m_calls += other.p2m_calls
        self.m2m_calls += other.m2m_calls
        self.l2l_calls += other.l2l_calls
        self.l2p_calls += other.l2p_calls
        for k, v in other.times.items():
            self.add_time(k, v)

    def as_dict(self) -> dict:
        return {
            "p2p_pairs": self.p2p_pairs,
            "p2p_skipped": self.p2p_skipped,
            "p2p_flops": self.p2p_flops,
            "m2l_calls": self.m2l_calls,
            "m2p_calls": self.m2p_calls,
            "p2m_calls": self.p2m_calls,
            "m2m_calls": self.m2m_calls,
            "l2l_calls": self.l2l_calls,
            "l2p_calls": self.l2p_calls,
            "times": {k: float(v) for k, v in sorted(self.times.items())},
        }


def _span(ps: ParticleSet) -> tuple[int, int]:
    return ps.x.ctypes.data, ps.x.ctypes.data + ps.x.nbytes


def _same_storage(a: ParticleSet, b: ParticleSet) -> bool:
    sa, sb = _span(a), _span(b)
    if sa == sb:
        return True
    if sa[1] <= sb[0] or sb[1] <= sa[0]:
        return False
    raise ValueError("p2p target and source ranges partially overlap")


def _center3(center) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(c)):
        raise ValueError("expansion center must be finite")
    return c


def p2p(targets: ParticleSet, sources: ParticleSet, mutual: bool = False,
        use_rsqrt: bool = False, scalar: bool = False,
        stats: KernelStats | None = None) -> None:
    """Pairwise accumulation of potential and force into ``targets``.

    ``targets`` and ``sources`` must either share storage (self interaction,
    i == j excluded) or be disjoint.  ``mutual`` applies each pair
    symmetrically to both sides; with it the potentials match a pair of
    directed sweeps up to summation order.  ``scalar`` selects the reference
    inner loop instead of the lane-batched one; ``use_rsqrt`` switches to the
    approximate reciprocal square root (agrees to 5e-4 on potentials).
    """
    same = _same_storage(targets, sources)
    s = np.zeros(3, dtype=np.int64)
    a = targets if same else None
    if mutual:
        if same:
            _t._p2p_mutual_self(targets.x, targets.y, targets.z, targets.q,
                                targets.phi, targets.fx, targets.fy, targets.fz,
                                0, targets.n, use_rsqrt, s)
        else:
            n = targets.n
            x = np.concatenate((targets.x, sources.x))
            y = np.concatenate((targets.y, sources.y))
            z = np.concatenate((targets.z, sources.z))
            q = np.concatenate((targets.q, sources.q))
            phi = np.concatenate((targets.phi, sources.phi))
            fx = np.concatenate((targets.fx, sources.fx))
            fy = np.concatenate((targets.fy, sources.fy))
            fz = np.concatenate((targets.fz, sources.fz))
            _t._p2p_mutual(x, y, z, q, phi, fx, fy, fz, 0, n, n, n + sources.n, use_rsqrt, s)
            targets.phi[:] = phi[:n]
            targets.fx[:] = fx[:n]
            targets.fy[:] = fy[:n]
            targets.fz[:] = fz[:n]
            sources.phi[:] = phi[n:]
            sources.fx[:] = fx[n:]
            sources.fy[:] = fy[n:]
            sources.fz[:] = fz[n:]
    else:
        core = _t._p2p_scalar if scalar else _t._p2p_batched
        if same:
            core(targets.x, targets.y, targets.z, targets.q,
                 targets.phi, targets.fx, targets.fy, targets.fz,
                 0, targets.n, 0, sources.n, True, use_rsqrt, s)
        else:
            n = targets.n
            x = np.concatenate((targets.x, sources.x))
            y = np.concatenate((targets.y, sources.y))
            z = np.concatenate((targets.z, sources.z))
            q = np.concatenate((targets.q, sources.q))
            phi = np.concatenate((targets.phi, np.zeros(sources.n)))
            fx = np.concatenate((targets.fx, np.zeros(sources.n)))
            fy = np.concatenate((targets.fy, np.zeros(sources.n)))
            fz = np.concatenate((targets.fz, np.zeros(sources.n)))
            core(x, y, z, q, phi, fx, fy, fz, 0, n, n, n + sources.n, False, use_rsqrt, s)
            targets.phi[:] = phi[:n]
            targets.fx[:] = fx[:n]
            targets.fy[:] = fy[:n]
            targets.fz[:] = fz[:n]
    if stats is not None:
        stats.p2p_pairs += int(s[0])
        stats.p2p_skipped += int(s[1])
        stats.p2p_flops += int(s[2])


def direct(ps: ParticleSet, target_indices: np.ndarray | None = None
           ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """O(N^2) oracle: scalar-path potentials and forces, self pairs excluded.

    Returns fresh (phi, fx, fy, fz) arrays for the selected targets (all
    bodies by default); accumulators on ``ps`` are left untouched.
    """
    if ps.n == 0:
        raise ValueError("empty particle set")
    if target_indices is None:
        tidx = np.arange(ps.n, dtype=np.int64)
    else:
        tidx = np.ascontiguousarray(target_indices, dtype=np.int64)
        if tidx.size and (tidx.min() < 0 or tidx.max() >= ps.n):
            raise ValueError("target index out of range")
    phi = np.zeros(tidx.shape[0])
    fx = np.zeros(tidx.shape[0])
    fy = np.zeros(tidx.shape[0])
    fz = np.zeros(tidx.shape[0])
    _t._direct_subset(ps.x, ps.y, ps.z, ps.q, tidx, phi, fx, fy, fz)
    return phi, fx, fy, fz


def p2m(bodies: ParticleSet, center, p: int, stats: KernelStats | None = None) -> Expansion:
    """Moments of ``bodies`` about ``center``: M_m = sum_j q_j (x_j - c)^m / m!."""
    e = Expansion.zeros(p)
    c = _center3(center)
    _t._p2m(bodies.x, bodies.y, bodies.z, bodies.q, 0, bodies.n,
            c[0], c[1], c[2], p, e.coeffs)
    if stats is not None:
        stats.p2m_calls += 1
    return e


def m2m(e: Expansion, shift, stats: KernelStats | None = None) -> Expansion:
    """Moments re-centered to old_center + shift.  Exact for degrees < p."""
    out = Expansion.zeros(e.order)
    t = -_center3(shift)  # core wants old_center - new_center
    _t._m2m(e.coeffs, t[0], t[1], t[2], e.order, out.coeffs)
    if stats is not None:
        stats.m2m_calls += 1
    return out


def m2l(e: Expansion, r, stats: KernelStats | None = None) -> Expansion:
    """Local expansion at target_center = source_center + r from moments.

    L_n = (1/n!) sum_{|m| < p - |n|} (-1)^|m| M_m D_{m+n}(r).  The derivative
    tensors are generated here by recurrence; r = 0 is rejected.
    """
    rv = _center3(r)
    if rv[0] == 0.0 and rv[1] == 0.0 and rv[2] == 0.0:
        raise ValueError("coincident expansion centers")
    out = Expansion.zeros(e.order)
    D = np.empty(ncoef(e.order), dtype=np.float64)
    _t._m2l(e.coeffs, rv[0], rv[1], rv[2], e.order, out.coeffs, D)
    if stats is not None:
        stats.m2l_calls += 1
    return out


def l2l(l: Expansion, shift, stats: KernelStats | None = None) -> Expansion:
    """Local expansion re-centered to old_center + shift.  Exact for degrees < p."""
    out = Expansion.zeros(l.order)
    t = _center3(shift)
    _t._l2l(l.coeffs, t[0], t[1], t[2], l.order, out.coeffs)
    if stats is not None:
        stats.l2l_calls += 1
    return out


def l2p(l: Expansion, center, bodies: ParticleSet, stats: KernelStats | None = None) -> None:
    """Add the local expansion's potential and force to every body."""
    c = _center3(center)
    _t._l2p(l.coeffs, c[0], c[1], c[2], l.order,
            bodies.x, bodies.y, bodies.z,
            bodies.phi, bodies.fx, bodies.fy, bodies.fz, 0, bodies.n)
    if stats is not None:
        stats.l2p_calls += 1


def m2p(e: Expansion, center, bodies: ParticleSet, stats: KernelStats | None = None) -> None:
    """Evaluate moments directly at bodies (treecode far-field kernel)."""
    c = _center3(center)
    d2 = (bodies.x - c[0]) ** 2 + (bodies.y - c[1]) ** 2 + (bodies.z - c[2]) ** 2
    if np.any(d2 == 0.0):
        raise ValueError("coincident body and expansion center")
    D = np.empty(ncoef(e.order + 1), dtype=np.float64)
    _t._m2p(e.coeffs, c[0], c[1], c[2], e.order,
            bodies.x, bodies.y, bodies.z,
            bodies.phi, bodies.fx, bodies.fy, bodies.fz, 0, bodies.n, D)
    if stats is not None:
        stats.m2p_calls += 1
