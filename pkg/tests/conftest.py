"""Shared fixtures: seeded particle sets, prebuilt trees, direct-sum references.

Session-scoped fixtures are treated as read-only by the tests; anything that
mutates accumulators works on a copy (or resets them afterwards).
"""

import numpy as np
import pytest

import fmmkit as fk


def force_error(bodies, ref, idx=None):
    """Relative L2 force error of ``bodies`` against a (phi, fx, fy, fz) tuple."""
    _, fx, fy, fz = ref
    if idx is None:
        idx = slice(None)
    num = (bodies.fx[idx] - fx) ** 2 + (bodies.fy[idx] - fy) ** 2 + (bodies.fz[idx] - fz) ** 2
    den = fx**2 + fy**2 + fz**2
    return float(np.sqrt(num.sum() / den.sum()))


def potential_error(bodies, ref, idx=None):
    """Relative L2 potential error of ``bodies`` against a reference tuple."""
    phi = ref[0]
    if idx is None:
        idx = slice(None)
    num = (bodies.phi[idx] - phi) ** 2
    return float(np.sqrt(num.sum() / (phi**2).sum()))


def clustered_points(n, seed=0):
    """Blob mixture with wildly uneven density, for adaptive-refinement tests."""
    rng = np.random.default_rng(seed)
    centers = rng.random((4, 3))
    scales = np.array([0.002, 0.01, 0.05, 0.2])
    which = rng.integers(0, 4, size=n)
    pts = centers[which] + scales[which, None] * rng.standard_normal((n, 3))
    q = rng.uniform(-1.0, 1.0, size=n)
    return fk.ParticleSet(pts[:, 0], pts[:, 1], pts[:, 2], q)


@pytest.fixture(scope="session")
def uniform_2k():
    return fk.generate_distribution("uniform", 2000, seed=11)


@pytest.fixture(scope="session")
def tree_2k(uniform_2k):
    tree = fk.build_tree(uniform_2k.copy(), ncrit=30)
    fk.check_invariants(tree)
    return tree


@pytest.fixture(scope="session")
def ref_2k(tree_2k):
    """Direct-summation (phi, fx, fy, fz) for tree_2k's reordered bodies."""
    return fk.direct(tree_2k.bodies)


@pytest.fixture(scope="session")
def clustered_tree():
    tree = fk.build_tree(clustered_points(3000, seed=7), ncrit=20)
    fk.check_invariants(tree)
    return tree


@pytest.fixture(scope="session")
def clustered_ref(clustered_tree):
    return fk.direct(clustered_tree.bodies)


@pytest.fixture(autouse=True)
def _reset_session_trees(request):
    """Clear accumulators and attached expansions on the shared trees after
    each test so evaluation order cannot leak between tests."""
    yield
    for name in ("tree_2k", "clustered_tree"):
        if name in request.fixturenames:
            tree = request.getfixturevalue(name)
            tree.reset_accumulators()
            tree.multipole = None
            tree.local = None
            tree.p = None
