"""Picking an expansion order and opening angle for a requested accuracy.

Accuracy is measured on a fixed random sample of the tree's own bodies
against direct summation, as the relative L2 force error

    err = sqrt( sum |f - f_ref|^2 / sum |f_ref|^2 ).

For one order, the largest acceptable opening angle is found by bisection
(error grows with theta); across orders the winner is the one whose tuned
configuration traverses fastest, ties going to the smaller order.  Only the
dual-tree traversal phase is timed: tree build and the vertical passes are
shared costs that do not depend on theta.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from .kernels import direct
from .mac import MacConfig
from .traversal import EvalConfig, evaluate_dual_tree
from .tree import Tree

THETA_RESOLUTION = 0.01


def error_sample(tree: Tree, sample: int = 1000, seed: int = 0):
    """Fixed sample of tree-order body indices and their exact forces."""
    n = tree.n
    if sample >= n:
        idx = np.arange(n, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=sample, replace=False)).astype(np.int64)
    _, fx, fy, fz = direct(tree.bodies, idx)
    return idx, np.stack([fx, fy, fz], axis=1)


def sampled_force_error(tree: Tree, idx: np.ndarray, ref: np.ndarray) -> float:
    """Relative L2 force error of the tree's current accumulators at idx."""
    b = tree.bodies
    got = np.stack([b.fx[idx], b.fy[idx], b.fz[idx]], axis=1)
    den = float(np.sum(ref * ref))
    if den == 0.0:
        raise ValueError("reference forces vanish; error metric undefined")
    return float(np.sqrt(np.sum((got - ref) ** 2) / den))


def verify_against_direct(tree: Tree, sample: int = 1000, seed: int = 0) -> float:
    """Error of whatever evaluation last ran on the tree (CLI --verify)."""
    idx, ref = error_sample(tree, sample=sample, seed=seed)
    return sampled_force_error(tree, idx, ref)


def max_theta_for_error(tree: Tree, p: int, target_error: float,
                        mac_kind: str = "fmm", *, threads: int = 1,
                        sample: int = 1000, seed: int = 0,
                        theta_lo: float = 0.05, theta_hi: float = 2.0,
                        oracle=None) -> float:
    """Largest opening angle meeting ``target_error``, to 0.01 resolution.

    Bisects between a passing and a failing angle; raises ValueError when
    even ``theta_lo`` misses the target.  ``oracle`` lets callers reuse one
    (idx, ref) pair across many searches.
    """
    if target_error <= 0.0:
        raise ValueError(f"target error must be positive, got {target_error}")
    idx, ref = oracle if oracle is not None else error_sample(tree, sample, seed)

    def err_at(theta: float) -> float:
        cfg = EvalConfig(strategy="dualtree", mac=MacConfig(mac_kind, theta), p=p)
        evaluate_dual_tree(tree, cfg, threads=threads)
        return sampled_force_error(tree, idx, ref)

    err_lo = err_at(theta_lo)
    if err_lo > target_error:
        raise ValueError(
            f"target error {target_error:g} unreachable at p={p} "
            f"(error {err_lo:.3e} at theta={theta_lo})"
        )
    if err_at(theta_hi) <= target_error:
        return theta_hi
    lo, hi = theta_lo, theta_hi  # invariant: lo passes, hi fails
    while hi - lo > THETA_RESOLUTION:
        mid = 0.5 * (lo + hi)
        if err_at(mid) <= target_error:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class TuneEntry:
    """One candidate order with its tuned angle and traversal cost."""

    p: int
    theta: float | None           # None when the target is unreachable
    error: float | None           # sampled error at the tuned angle
    traversal_time: float | None  # median dual-tree traversal seconds

    @property
    def reachable(self) -> bool:
        return self.theta is not None


@dataclass
class TuneResult:
    target_error: float
    entries: list[TuneEntry]
    best: TuneEntry


def select_p_theta(tree: Tree, target_error: float,
                   p_candidates=(3, 4, 5, 6), mac_kind: str = "fmm", *,
                   threads: int = 1, sample: int = 1000, seed: int = 0,
                   reps: int = 3) -> TuneResult:
    """Tune theta per candidate order and keep the fastest configuration.

    Raises ValueError when no candidate order can reach the target.
    """
    oracle = error_sample(tree, sample=sample, seed=seed)
    idx, ref = oracle
    entries: list[TuneEntry] = []
    for p in sorted(p_candidates):
        try:
            theta = max_theta_for_error(tree, p, target_error, mac_kind,
                                        threads=threads, oracle=oracle)
        except ValueError:
            entries.append(TuneEntry(p=p, theta=None, error=None, traversal_time=None))
            continue
        cfg = EvalConfig(strategy="dualtree", mac=MacConfig(mac_kind, theta), p=p)
        times = []
        err = None
        for _ in range(max(1, reps)):
            rep = evaluate_dual_tree(tree, cfg, threads=threads)
            times.append(rep.traversal_time)
            err = sampled_force_error(tree, idx, ref)
        entries.append(TuneEntry(p=p, theta=theta, error=err,
                                 traversal_time=statistics.median(times)))
    viable = [e for e in entries if e.reachable]
    if not viable:
        raise ValueError(
            f"target error {target_error:g} unreachable for every candidate order "
            f"{tuple(sorted(p_candidates))}"
        )
    best = min(viable, key=lambda e: (e.traversal_time, e.p))
    return TuneResult(target_error=target_error, entries=entries, best=best)
