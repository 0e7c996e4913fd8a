"""Expansion operators and the pairwise kernel, checked against independent
numpy oracles (vectorized direct sums, recomputed moments, finite differences).
"""

import numpy as np
import pytest

import fmmkit as fk
from fmmkit.kernels import Expansion, KernelStats


def numpy_direct(ps):
    """All-pairs reference: phi_i = sum q_j / r_ij, f_i = sum q_j (x_i - x_j) / r_ij^3."""
    pos = ps.positions()
    d = pos[:, None, :] - pos[None, :, :]
    r2 = (d**2).sum(-1)
    np.fill_diagonal(r2, np.inf)
    inv_r = 1.0 / np.sqrt(r2)
    phi = (ps.q[None, :] * inv_r).sum(1)
    w = ps.q[None, :] * inv_r**3
    f = (w[:, :, None] * d).sum(1)
    return phi, f[:, 0], f[:, 1], f[:, 2]


def multi_indices(p):
    """Graded-lex multi-indices with |m| < p, matching expansion storage."""
    out = []
    for deg in range(p):
        for mx in range(deg, -1, -1):
            for my in range(deg - mx, -1, -1):
                out.append((mx, my, deg - mx - my))
    return out


def random_bodies(n, seed, center=(0.0, 0.0, 0.0), radius=1.0, signed=True):
    rng = np.random.default_rng(seed)
    pts = np.asarray(center) + radius * (rng.random((n, 3)) - 0.5)
    q = rng.uniform(-1.0, 1.0, n) if signed else rng.uniform(0.1, 1.0, n)
    return fk.ParticleSet(pts[:, 0], pts[:, 1], pts[:, 2], q)


# ----------------------------------------------------------------------------
# P2P / direct
# ----------------------------------------------------------------------------

def test_p2p_matches_numpy_oracle():
    ps = random_bodies(200, seed=1)
    want = numpy_direct(ps)
    fk.p2p(ps, ps)
    assert np.allclose(ps.phi, want[0], rtol=1e-12, atol=1e-14)
    assert np.allclose(ps.fx, want[1], rtol=1e-12, atol=1e-14)
    assert np.allclose(ps.fy, want[2], rtol=1e-12, atol=1e-14)
    assert np.allclose(ps.fz, want[3], rtol=1e-12, atol=1e-14)


def test_two_unit_charges():
    ps = fk.ParticleSet(np.array([0.0, 1.0]), np.zeros(2), np.zeros(2), np.ones(2))
    fk.p2p(ps, ps)
    assert ps.phi == pytest.approx([1.0, 1.0])
    assert ps.fx == pytest.approx([-1.0, 1.0])
    assert np.all(ps.fy == 0.0) and np.all(ps.fz == 0.0)


def test_single_body_self_skip():
    ps = fk.ParticleSet(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1))
    stats = KernelStats()
    fk.p2p(ps, ps, stats=stats)
    assert ps.phi[0] == 0.0 and ps.fx[0] == 0.0
    assert stats.p2p_pairs == 0


def test_direct_equals_scalar_p2p_bitwise():
    ps = random_bodies(120, seed=2)
    phi, fx, fy, fz = fk.direct(ps)
    fk.p2p(ps, ps, scalar=True)
    assert np.array_equal(phi, ps.phi)
    assert np.array_equal(fx, ps.fx)
    assert np.array_equal(fy, ps.fy)
    assert np.array_equal(fz, ps.fz)


def test_batched_matches_scalar():
    # odd count exercises the remainder lanes of the batched path
    ps = random_bodies(137, seed=3)
    ref = ps.copy()
    fk.p2p(ref, ref, scalar=True)
    fk.p2p(ps, ps, scalar=False)
    assert np.allclose(ps.phi, ref.phi, rtol=1e-13, atol=1e-16)
    assert np.allclose(ps.fx, ref.fx, rtol=1e-13, atol=1e-16)


def test_mutual_matches_directed():
    a = random_bodies(80, seed=4, center=(0.0, 0.0, 0.0))
    b = random_bodies(60, seed=5, center=(3.0, 0.0, 0.0))
    am, bm = a.copy(), b.copy()
    fk.p2p(am, bm, mutual=True)
    fk.p2p(a, b)
    fk.p2p(b, a)
    for got, want in ((am, a), (bm, b)):
        assert np.allclose(got.phi, want.phi, rtol=1e-12, atol=1e-15)
        assert np.allclose(got.fx, want.fx, rtol=1e-12, atol=1e-15)


def test_mutual_self_matches_directed_self():
    ps = random_bodies(90, seed=6)
    ref = ps.copy()
    fk.p2p(ref, ref)
    fk.p2p(ps, ps, mutual=True)
    assert np.allclose(ps.phi, ref.phi, rtol=1e-12, atol=1e-15)
    assert np.allclose(ps.fz, ref.fz, rtol=1e-12, atol=1e-15)


def test_rsqrt_path_close_to_scalar():
    ps = random_bodies(300, seed=7)
    ref = ps.copy()
    fk.p2p(ref, ref, scalar=True)
    fk.p2p(ps, ps, use_rsqrt=True)
    rel = np.abs(ps.phi - ref.phi) / np.abs(ref.phi)
    assert rel.max() <= 5e-4


def test_pair_and_flop_accounting():
    ps = random_bodies(50, seed=8)
    stats = KernelStats()
    fk.p2p(ps, ps, stats=stats)
    assert stats.p2p_pairs == 50 * 49
    assert stats.p2p_flops == 20 * stats.p2p_pairs

    stats = KernelStats()
    fk.p2p(ps, ps, mutual=True, stats=stats)
    assert stats.p2p_pairs == 50 * 49  # symmetric: both sides accumulate

    a = random_bodies(10, seed=9)
    b = random_bodies(7, seed=10, center=(5.0, 0.0, 0.0))
    stats = KernelStats()
    fk.p2p(a, b, stats=stats)
    assert stats.p2p_pairs == 70
    stats = KernelStats()
    fk.p2p(a, b, mutual=True, stats=stats)
    assert stats.p2p_pairs == 140


def test_coincident_bodies_skipped_not_counted():
    ps = fk.ParticleSet(np.zeros(2), np.zeros(2), np.zeros(2), np.ones(2))
    stats = KernelStats()
    fk.p2p(ps, ps, stats=stats)
    assert np.all(ps.phi == 0.0)
    assert stats.p2p_pairs == 0
    assert stats.p2p_skipped == 2
    assert stats.p2p_flops == 0


def test_p2p_rejects_partial_overlap():
    ps = random_bodies(20, seed=11)
    with pytest.raises(ValueError, match="overlap"):
        fk.p2p(ps.view(0, 10), ps.view(5, 15))


def test_direct_subset_matches_full():
    ps = random_bodies(60, seed=12)
    idx = np.array([0, 7, 31, 59])
    full = fk.direct(ps)
    sub = fk.direct(ps, idx)
    for got, want in zip(sub, full):
        assert np.array_equal(got, want[idx])
    with pytest.raises(ValueError, match="out of range"):
        fk.direct(ps, np.array([60]))


# ----------------------------------------------------------------------------
# P2M
# ----------------------------------------------------------------------------

def test_p2m_single_charge_at_center():
    ps = fk.ParticleSet(np.array([0.5]), np.array([0.5]), np.array([0.5]), np.array([1.0]))
    for p in (1, 3, 6):
        e = fk.p2m(ps, (0.5, 0.5, 0.5), p)
        assert e.coeffs[0] == 1.0
        assert np.all(e.coeffs[1:] == 0.0)


def test_p2m_dipole_term():
    d, q = 0.25, 3.0
    ps = fk.ParticleSet(np.array([d]), np.array([0.0]), np.array([0.0]), np.array([q]))
    e = fk.p2m(ps, (0.0, 0.0, 0.0), 2)
    # graded-lex order: (0,0,0), (1,0,0), (0,1,0), (0,0,1)
    assert e.coeffs[0] == pytest.approx(q)
    assert e.coeffs[1] == pytest.approx(q * d)
    assert e.coeffs[2] == 0.0 and e.coeffs[3] == 0.0


def test_p2m_matches_recomputed_moments():
    ps = random_bodies(40, seed=13)
    center = np.array([0.1, -0.2, 0.3])
    p = 5
    e = fk.p2m(ps, center, p)
    from math import factorial
    for idx, (mx, my, mz) in enumerate(multi_indices(p)):
        want = np.sum(
            ps.q
            * (ps.x - center[0]) ** mx
            * (ps.y - center[1]) ** my
            * (ps.z - center[2]) ** mz
        ) / (factorial(mx) * factorial(my) * factorial(mz))
        assert e.coeffs[idx] == pytest.approx(want, rel=1e-12, abs=1e-15)


# ----------------------------------------------------------------------------
# M2M / L2L exactness
# ----------------------------------------------------------------------------

def test_m2m_identity_shift():
    ps = random_bodies(30, seed=14)
    e = fk.p2m(ps, (0.0, 0.0, 0.0), 4)
    shifted = fk.m2m(e, (0.0, 0.0, 0.0))
    assert np.array_equal(shifted.coeffs, e.coeffs)


def test_m2m_matches_recomputed_p2m():
    rng = np.random.default_rng(15)
    for p in range(1, 11):
        for _ in range(100):
            n = int(rng.integers(2, 20))
            pts = rng.random((n, 3))
            q = rng.uniform(-1, 1, n)
            ps = fk.ParticleSet(pts[:, 0], pts[:, 1], pts[:, 2], q)
            c1 = rng.random(3)
            c2 = rng.random(3)
            via_shift = fk.m2m(fk.p2m(ps, c1, p), c2 - c1)
            want = fk.p2m(ps, c2, p)
            scale = np.abs(want.coeffs).max()
            assert np.allclose(via_shift.coeffs, want.coeffs, rtol=1e-12, atol=1e-12 * max(scale, 1.0))


def test_m2m_round_trip():
    ps = random_bodies(25, seed=16)
    e = fk.p2m(ps, (0.0, 0.0, 0.0), 6)
    back = fk.m2m(fk.m2m(e, (0.3, -0.7, 0.2)), (-0.3, 0.7, -0.2))
    assert np.allclose(back.coeffs, e.coeffs, rtol=1e-12, atol=1e-14)


def test_m2m_rejects_bad_shift():
    e = Expansion.zeros(3)
    with pytest.raises(Exception):
        fk.m2m(e, (1.0, 2.0))  # shift must be a 3-vector
    with pytest.raises(ValueError):
        fk.m2m(e, (np.nan, 0.0, 0.0))


def test_l2l_identities():
    rng = np.random.default_rng(17)
    for p in range(1, 11):
        for _ in range(100):
            local = Expansion(p, rng.uniform(-1, 1, fk.ncoef(p)))
            shift = rng.uniform(-0.5, 0.5, 3)
            shifted = fk.l2l(local, shift)
            # evaluating the re-centered polynomial anywhere must agree
            x = rng.uniform(-0.5, 0.5, 3)
            probe = fk.ParticleSet(*(np.array([v]) for v in x), np.array([0.0]))
            fk.l2p(local, (0.0, 0.0, 0.0), probe)
            want = probe.phi[0]
            probe2 = fk.ParticleSet(*(np.array([v]) for v in x), np.array([0.0]))
            fk.l2p(shifted, shift, probe2)
            assert probe2.phi[0] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_l2l_constant_invariance():
    local = Expansion.zeros(4)
    local.coeffs[0] = 2.5
    shifted = fk.l2l(local, (0.4, 0.1, -0.9))
    assert shifted.coeffs[0] == pytest.approx(2.5)
    assert np.allclose(shifted.coeffs[1:], 0.0, atol=1e-15)


# ----------------------------------------------------------------------------
# M2L / far-field chain
# ----------------------------------------------------------------------------

def test_m2l_monopole_gives_coulomb():
    e = Expansion.zeros(3)
    e.coeffs[0] = 2.0
    r = np.array([0.0, 4.0, 0.0])
    local = fk.m2l(e, r)
    assert local.coeffs[0] == pytest.approx(2.0 / 4.0, rel=1e-14)


def test_m2l_linearity_and_zero():
    z = fk.m2l(Expansion.zeros(4), (1.0, 2.0, 2.0))
    assert np.all(z.coeffs == 0.0)
    with pytest.raises(ValueError, match="coincident"):
        fk.m2l(Expansion.zeros(3), (0.0, 0.0, 0.0))


def test_far_field_chain_converges_in_p():
    src = random_bodies(50, seed=18, center=(0.0, 0.0, 0.0), radius=1.0)
    tgt = random_bodies(20, seed=19, center=(4.0, 0.0, 0.0), radius=1.0, signed=False)
    tgt.q[:] = 0.0  # probes only
    ref = tgt.copy()
    fk.p2p(ref, src)
    prev = np.inf
    for p in (2, 4, 6, 8):
        m = fk.p2m(src, (0.0, 0.0, 0.0), p)
        local = fk.m2l(m, (4.0, 0.0, 0.0))
        probe = tgt.copy()
        fk.l2p(local, (4.0, 0.0, 0.0), probe)
        err = np.sqrt(np.sum((probe.phi - ref.phi) ** 2) / np.sum(ref.phi**2))
        assert err < prev
        prev = err
    assert prev < 1e-5


def test_m2p_matches_direct_far_away():
    src = random_bodies(20, seed=20, center=(0.0, 0.0, 0.0), radius=0.2)
    probe = fk.ParticleSet(np.array([2.0]), np.array([0.1]), np.array([-0.1]), np.array([0.0]))
    ref = probe.copy()
    fk.p2p(ref, src)
    m = fk.p2m(src, (0.0, 0.0, 0.0), 5)
    fk.m2p(m, (0.0, 0.0, 0.0), probe)
    assert probe.phi[0] == pytest.approx(ref.phi[0], rel=1e-5)
    assert probe.fx[0] == pytest.approx(ref.fx[0], rel=1e-4)


def test_m2p_single_monopole():
    m = Expansion.zeros(4)
    m.coeffs[0] = 3.0
    probe = fk.ParticleSet(np.array([0.0]), np.array([0.0]), np.array([6.0]), np.array([0.0]))
    fk.m2p(m, (0.0, 0.0, 0.0), probe)
    assert probe.phi[0] == pytest.approx(0.5, rel=1e-14)


def test_m2p_error_decays_with_distance():
    src = random_bodies(50, seed=21, center=(0.0, 0.0, 0.0), radius=1.0)
    m = fk.p2m(src, (0.0, 0.0, 0.0), 4)
    errs = []
    for r in (2.0, 4.0, 8.0):
        probe = fk.ParticleSet(np.array([r]), np.array([0.0]), np.array([0.0]), np.array([0.0]))
        ref = probe.copy()
        fk.p2p(ref, src)
        fk.m2p(m, (0.0, 0.0, 0.0), probe)
        errs.append(abs(probe.phi[0] - ref.phi[0]) / abs(ref.phi[0]))
    # theta halves each step; error should drop by roughly theta^p = 16x
    assert errs[1] < errs[0] / 6
    assert errs[2] < errs[1] / 6


# ----------------------------------------------------------------------------
# Force consistency (forces are the negative gradient of the potential)
# ----------------------------------------------------------------------------

def _fd_force(eval_phi, x, h=1e-5):
    g = np.zeros(3)
    for ax in range(3):
        xp, xm = x.copy(), x.copy()
        xp[ax] += h
        xm[ax] -= h
        g[ax] = (eval_phi(xp) - eval_phi(xm)) / (2 * h)
    return -g


def test_l2p_force_matches_finite_difference():
    rng = np.random.default_rng(22)
    local = Expansion(5, rng.uniform(-1, 1, fk.ncoef(5)))
    center = np.array([0.2, -0.1, 0.4])

    def phi_at(x):
        probe = fk.ParticleSet(*(np.array([v]) for v in x), np.array([0.0]))
        fk.l2p(local, center, probe)
        return probe.phi[0]

    x = np.array([0.5, 0.2, 0.1])
    want = _fd_force(phi_at, x)
    probe = fk.ParticleSet(*(np.array([v]) for v in x), np.array([0.0]))
    fk.l2p(local, center, probe)
    got = np.array([probe.fx[0], probe.fy[0], probe.fz[0]])
    assert np.allclose(got, want, rtol=1e-5, atol=1e-8)


def test_l2p_linear_term_constant_force():
    local = Expansion.zeros(3)
    local.coeffs[1] = 2.0  # coefficient of (x - cx)
    ps = random_bodies(5, seed=23)
    ps.reset_accumulators()
    fk.l2p(local, (0.0, 0.0, 0.0), ps)
    assert np.allclose(ps.fx, -2.0)
    assert np.allclose(ps.fy, 0.0)


def test_m2p_force_matches_finite_difference():
    src = random_bodies(30, seed=24, center=(0.0, 0.0, 0.0), radius=0.5)
    m = fk.p2m(src, (0.0, 0.0, 0.0), 6)

    def phi_at(x):
        probe = fk.ParticleSet(*(np.array([v]) for v in x), np.array([0.0]))
        fk.m2p(m, (0.0, 0.0, 0.0), probe)
        return probe.phi[0]

    x = np.array([2.0, 1.0, -0.5])
    want = _fd_force(phi_at, x)
    probe = fk.ParticleSet(*(np.array([v]) for v in x), np.array([0.0]))
    fk.m2p(m, (0.0, 0.0, 0.0), probe)
    got = np.array([probe.fx[0], probe.fy[0], probe.fz[0]])
    assert np.allclose(got, want, rtol=1e-5, atol=1e-8)


# ----------------------------------------------------------------------------
# Validation
# ----------------------------------------------------------------------------

def test_expansion_validation():
    with pytest.raises(ValueError):
        Expansion(0, np.zeros(0))
    with pytest.raises(ValueError):
        Expansion(13, np.zeros(1000))
    with pytest.raises(ValueError, match="count"):
        Expansion(3, np.zeros(11))
    assert fk.ncoef(3) == 10
    assert fk.ncoef(4) == 20


def test_zero_expansion_evaluates_to_zero():
    ps = random_bodies(10, seed=25)
    ps.reset_accumulators()
    fk.l2p(Expansion.zeros(4), (0.0, 0.0, 0.0), ps)
    fk.m2p(Expansion.zeros(4), (9.0, 9.0, 9.0), ps)
    assert np.all(ps.phi == 0.0) and np.all(ps.fx == 0.0)


def test_kernel_stats_merge():
    a = KernelStats(p2p_pairs=3, p2p_flops=60, m2l_calls=2)
    a.add_time("p2p", 0.5)
    b = KernelStats(p2p_pairs=1, p2p_flops=20, m2p_calls=4)
    b.add_time("p2p", 0.25)
    b.add_time("m2l", 1.0)
    a.merge(b)
    assert a.p2p_pairs == 4 and a.p2p_flops == 80
    assert a.m2l_calls == 2 and a.m2p_calls == 4
    assert a.times["p2p"] == pytest.approx(0.75)
    assert a.times["m2l"] == pytest.approx(1.0)
    d = a.as_dict()
    assert d["p2p_flops"] == 20 * d["p2p_pairs"]
