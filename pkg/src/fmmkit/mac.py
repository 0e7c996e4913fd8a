"""Multipole acceptance criteria.

All three criteria are pure predicates on a (target, source) cell pair with
a strict ``<`` comparison; a zero center distance always rejects.  Squared
forms are used so no square root is taken:

* ``bh``    2 * rmax_s / R < theta      (target treated as a point)
* ``bmax``  bmax_s / R < theta
* ``fmm``   (bmax_t + bmax_s) / R < theta

The matching error bound estimate is (bmax_s / R)^p for the source-only
criteria and ((bmax_t + bmax_s) / R)^p for ``fmm``; the far-field error of
an evaluation run scales as O(theta^p).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

KINDS = ("bh", "bmax", "fmm")
KIND_CODES = {"bh": 0, "bmax": 1, "fmm": 2}

THETA_MAX = 2.0


@dataclass(frozen=True)
class MacConfig:
    kind: str
    theta: float

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown MAC kind {self.kind!r}: expected one of {KINDS}")
        if not 0.0 < self.theta <= THETA_MAX:
            raise ValueError(f"theta must be in (0, {THETA_MAX}], got {self.theta}")

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]


def accept(cfg: MacConfig, target, source) -> bool:
    """True when the pair may be approximated under ``cfg``.

    ``target``/``source`` are cells (anything exposing ``center``, ``bmax``
    and ``rmax``).  Uses the same squared-form arithmetic as the traversal
    cores, so decisions agree bit for bit.
    """
    tc = target.center
    sc = source.center
    dx = float(tc[0] - sc[0])
    dy = float(tc[1] - sc[1])
    dz = float(tc[2] - sc[2])
    r2 = dx * dx + dy * dy + dz * dz
    if r2 == 0.0:
        return False
    th2 = cfg.theta * cfg.theta
    if cfg.kind == "bh":
        s = 2.0 * source.rmax
    elif cfg.kind == "bmax":
        s = source.bmax
    else:
        s = target.bmax + source.bmax
    return s * s < th2 * r2


def error_bound(cfg: MacConfig, target, source, p: int) -> float:
    """Leading-order error estimate of approximating the pair at order p.

    Returns +inf when the centers coincide (the pair is never approximated).
    """
    if p < 1:
        raise ValueError(f"expansion order must be >= 1, got {p}")
    tc = target.center
    sc = source.center
    r = math.dist((float(tc[0]), float(tc[1]), float(tc[2])),
                  (float(sc[0]), float(sc[1]), float(sc[2])))
    if r == 0.0:
        return math.inf
    if cfg.kind == "fmm":
        s = target.bmax + source.bmax
    else:
        s = source.bmax
    return (s / r) ** p
