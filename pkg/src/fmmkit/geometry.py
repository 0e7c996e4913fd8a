"""Geometric primitives: particles, bounding boxes and Morton keys.

This module owns everything the tree builder consumes: the SoA particle
container, axis-aligned boxes, the 63-bit Morton (Z-order) key machinery
used to linearise the octree, and helpers to generate or load particle
distributions.  Nothing in here knows about expansions or traversals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numba import njit

MAX_LEVEL = 21  # 3 * 21 = 63 key bits in a uint64


# ----------------------------------------------------------------------------
# Morton keys
# ----------------------------------------------------------------------------

def _spread21(v: int) -> int:
    v &= 0x1FFFFF
    v = (v | v << 32) & 0x1F00000000FFFF
    v = (v | v << 16) & 0x1F0000FF0000FF
    v = (v | v << 8) & 0x100F00F00F00F00F
    v = (v | v << 4) & 0x10C30C30C30C30C3
    v = (v | v << 2) & 0x1249249249249249
    return v


def _compact21(v: int) -> int:
    v &= 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


@dataclass(frozen=True)
class MortonKey:
    """Interleaved octree key: ``level`` octant triples, x bit least significant.

    ``key`` holds 3*level bits; level 0 is the root (key 0).  Levels beyond
    ``MAX_LEVEL`` do not fit the 63-bit budget and are rejected outright.
    """

    key: int
    level: int

    def __post_init__(self) -> None:
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(
                f"level {self.level} out of range 0..{MAX_LEVEL}: max depth exceeded"
            )
        if not 0 <= self.key < (1 << (3 * self.level)) or (self.level == 0 and self.key != 0):
            raise ValueError(f"key {self.key:#x} does not fit level {self.level}")

    @property
    def parent(self) -> "MortonKey":
        if self.level == 0:
            raise ValueError("root key has no parent")
        return MortonKey(self.key >> 3, self.level - 1)

    def child(self, octant: int) -> "MortonKey":
        if not 0 <= octant < 8:
            raise ValueError(f"octant {octant} out of range 0..7")
        return MortonKey(self.key << 3 | octant, self.level + 1)


def morton_encode(ix: int, iy: int, iz: int, level: int = MAX_LEVEL) -> MortonKey:
    """Interleave grid indices into a Morton key at ``level``.

    Raises ValueError ("index overflow") when a component does not fit the
    ``2**level`` grid.
    """
    n = 1 << level
    for name, v in (("ix", ix), ("iy", iy), ("iz", iz)):
        if not 0 <= v < n:
            raise ValueError(f"index overflow: {name}={v} outside [0, {n}) at level {level}")
    shift = MAX_LEVEL - level
    key = (_spread21(ix << shift) | _spread21(iy << shift) << 1 | _spread21(iz << shift) << 2) >> (3 * shift)
    return MortonKey(key, level)


def morton_decode(mk: MortonKey) -> tuple[int, int, int]:
    """Inverse of :func:`morton_encode`: recover the (ix, iy, iz) triple."""
    shift = MAX_LEVEL - mk.level
    k = mk.key << (3 * shift)
    return (_compact21(k) >> shift, _compact21(k >> 1) >> shift, _compact21(k >> 2) >> shift)


def neighbor_key(mk: MortonKey, offset: tuple[int, int, int]) -> MortonKey | None:
    """Key of the same-level cell displaced by ``offset`` grid steps.

    Returns None when the displaced cell falls outside the level's grid;
    boundary cells therefore see truncated neighbor sets rather than any
    wrap-around.
    """
    ix, iy, iz = morton_decode(mk)
    n = 1 << mk.level
    jx, jy, jz = ix + offset[0], iy + offset[1], iz + offset[2]
    if not (0 <= jx < n and 0 <= jy < n and 0 <= jz < n):
        return None
    return morton_encode(jx, jy, jz, mk.level)


@njit(cache=True)
def _spread21_u64(v):
    v &= np.uint64(0x1FFFFF)
    v = (v | v << np.uint64(32)) & np.uint64(0x1F00000000FFFF)
    v = (v | v << np.uint64(16)) & np.uint64(0x1F0000FF0000FF)
    v = (v | v << np.uint64(8)) & np.uint64(0x100F00F00F00F00F)
    v = (v | v << np.uint64(4)) & np.uint64(0x10C30C30C30C30C3)
    v = (v | v << np.uint64(2)) & np.uint64(0x1249249249249249)
    return v


@njit(cache=True)
def _compact21_u64(v):
    v &= np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


@njit(cache=True)
def _encode_points(x, y, z, lo0, lo1, lo2, inv_h):
    """Depth-21 Morton keys for points inside the root cube (bulk, uint64)."""
    n = x.shape[0]
    keys = np.empty(n, dtype=np.uint64)
    top = np.int64((1 << MAX_LEVEL) - 1)
    for i in range(n):
        ix = np.int64((x[i] - lo0) * inv_h)
        iy = np.int64((y[i] - lo1) * inv_h)
        iz = np.int64((z[i] - lo2) * inv_h)
        if ix < 0:
            ix = 0
        if iy < 0:
            iy = 0
        if iz < 0:
            iz = 0
        if ix > top:
            ix = top
        if iy > top:
            iy = top
        if iz > top:
            iz = top
        keys[i] = (
            _spread21_u64(np.uint64(ix))
            | _spread21_u64(np.uint64(iy)) << np.uint64(1)
            | _spread21_u64(np.uint64(iz)) << np.uint64(2)
        )
    return keys


# ----------------------------------------------------------------------------
# Boxes
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by its two corners (inclusive)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3).copy())
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3).copy())
        if not np.all(self.hi >= self.lo):
            raise ValueError("Aabb hi must be >= lo on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def cube(self) -> "Aabb":
        """Smallest cube with the same center covering this box."""
        h = 0.5 * float(self.extent.max())
        c = self.center
        return Aabb(c - h, c + h)


def compute_bounds(ps: "ParticleSet") -> Aabb:
    """Tight bounding box of all bodies.  Errors on an empty set."""
    if ps.n == 0:
        raise ValueError("empty particle set")
    lo = np.array([ps.x.min(), ps.y.min(), ps.z.min()])
    hi = np.array([ps.x.max(), ps.y.max(), ps.z.max()])
    return Aabb(lo, hi)


# ----------------------------------------------------------------------------
# Particles
# ----------------------------------------------------------------------------

@dataclass
class ParticleSet:
    """Structure-of-arrays particle container.

    Positions and charges are inputs; ``phi`` and ``fx/fy/fz`` are output
    accumulators owned by the evaluation routines (they zero and fill them).
    All arrays are float64 and share one length.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    q: np.ndarray
    phi: np.ndarray = field(default=None)  # type: ignore[assignment]
    fx: np.ndarray = field(default=None)  # type: ignore[assignment]
    fy: np.ndarray = field(default=None)  # type: ignore[assignment]
    fz: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        self.z = np.ascontiguousarray(self.z, dtype=np.float64)
        self.q = np.ascontiguousarray(self.q, dtype=np.float64)
        n = self.x.shape[0]
        for name in ("phi", "fx", "fy", "fz"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.float64))
            else:
                setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        lengths = {arr.shape[0] for arr in (self.x, self.y, self.z, self.q, self.phi, self.fx, self.fy, self.fz)}
        if lengths != {n}:
            raise ValueError(f"particle arrays disagree on length: {sorted(lengths)}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def positions(self) -> np.ndarray:
        return np.column_stack((self.x, self.y, self.z))

    def reset_accumulators(self) -> None:
        self.phi[:] = 0.0
        self.fx[:] = 0.0
        self.fy[:] = 0.0
        self.fz[:] = 0.0

    def view(self, start: int, stop: int) -> "ParticleSet":
        """Shared-memory slice; writes to accumulators land in the parent."""
        return ParticleSet(
            self.x[start:stop], self.y[start:stop], self.z[start:stop], self.q[start:stop],
            self.phi[start:stop], self.fx[start:stop], self.fy[start:stop], self.fz[start:stop],
        )

    def copy(self) -> "ParticleSet":
        return ParticleSet(*(a.copy() for a in (self.x, self.y, self.z, self.q, self.phi, self.fx, self.fy, self.fz)))

    def permuted(self, perm: np.ndarray) -> "ParticleSet":
        return ParticleSet(*(a[perm].copy() for a in (self.x, self.y, self.z, self.q, self.phi, self.fx, self.fy, self.fz)))


def generate_distribution(kind: str, n: int, seed: int = 0) -> ParticleSet:
    """Seeded benchmark distribution.

    ``uniform`` (alias ``cube``) draws positions uniformly from [0, 1)^3 and
    assigns every body the charge 1/n, so the total charge is one regardless
    of n.  Unknown kinds raise ValueError.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if kind not in ("uniform", "cube"):
        raise ValueError(f"unknown distribution kind: {kind!r}")
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3))
    q = np.full(n, 1.0 / n)
    return ParticleSet(pts[:, 0], pts[:, 1], pts[:, 2], q)


def save_particles_csv(ps: ParticleSet, path: str) -> None:
    """Write bodies as CSV with header ``x,y,z,q``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "q"])
        for i in range(ps.n):
            w.writerow([repr(float(ps.x[i])), repr(float(ps.y[i])),
                        repr(float(ps.z[i])), repr(float(ps.q[i]))])


def load_particles_csv(path: str) -> ParticleSet:
    """Read bodies from CSV with header ``x,y,z,q``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or [h.strip().lower() for h in header] != ["x", "y", "z", "q"]:
            raise ValueError(f"bad particle CSV header in {path}: expected x,y,z,q")
        rows = []
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"bad particle CSV row at line {lineno}: expected 4 fields")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"bad particle CSV value at line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"empty particle set in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    return ParticleSet(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
