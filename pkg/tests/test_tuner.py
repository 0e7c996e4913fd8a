"""Accuracy sampling and the (p, theta) auto-tuner."""

import numpy as np
import pytest

import fmmkit as fk
from fmmkit.tuner import (
    error_sample,
    max_theta_for_error,
    sampled_force_error,
    select_p_theta,
    verify_against_direct,
)


@pytest.fixture(scope="module")
def tuner_tree():
    ps = fk.generate_distribution("uniform", 2000, seed=31)
    return fk.build_tree(ps, ncrit=30)


def dualtree(tree, p, theta):
    cfg = fk.EvalConfig(strategy="dualtree", mac=fk.MacConfig("fmm", theta), p=p)
    fk.evaluate_on_tree(tree, cfg)


# ----------------------------------------------------------------------------
# error sampling
# ----------------------------------------------------------------------------

def test_error_sample_subset(tuner_tree):
    idx, ref = error_sample(tuner_tree, sample=200, seed=3)
    assert idx.shape == (200,) and ref.shape == (200, 3)
    assert np.array_equal(idx, np.unique(idx))  # sorted, no repeats
    _, fx, fy, fz = fk.direct(tuner_tree.bodies, idx)
    assert np.array_equal(ref, np.stack([fx, fy, fz], axis=1))


def test_error_sample_full_when_small(tuner_tree):
    idx, ref = error_sample(tuner_tree, sample=10**6)
    assert np.array_equal(idx, np.arange(tuner_tree.n))
    assert ref.shape == (tuner_tree.n, 3)


def test_error_sample_seed_determinism(tuner_tree):
    a, _ = error_sample(tuner_tree, sample=100, seed=5)
    b, _ = error_sample(tuner_tree, sample=100, seed=5)
    c, _ = error_sample(tuner_tree, sample=100, seed=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampled_force_error_values(tuner_tree):
    idx, ref = error_sample(tuner_tree, sample=50, seed=1)
    b = tuner_tree.bodies
    b.reset_accumulators()
    b.fx[idx] = ref[:, 0]
    b.fy[idx] = ref[:, 1]
    b.fz[idx] = ref[:, 2]
    assert sampled_force_error(tuner_tree, idx, ref) == 0.0
    b.fx[idx[0]] += 0.25
    want = 0.25 / np.sqrt(np.sum(ref * ref))
    assert sampled_force_error(tuner_tree, idx, ref) == pytest.approx(want, rel=1e-12)
    b.reset_accumulators()


def test_sampled_force_error_zero_reference(tuner_tree):
    idx = np.array([0, 1], dtype=np.int64)
    ref = np.zeros((2, 3))
    with pytest.raises(ValueError, match="vanish"):
        sampled_force_error(tuner_tree, idx, ref)


def test_verify_against_direct(tuner_tree):
    dualtree(tuner_tree, p=5, theta=0.4)
    err = verify_against_direct(tuner_tree, sample=500, seed=0)
    assert 0.0 < err < 2e-3
    idx, ref = error_sample(tuner_tree, sample=500, seed=0)
    assert err == sampled_force_error(tuner_tree, idx, ref)
    tuner_tree.reset_accumulators()


# ----------------------------------------------------------------------------
# bisection for the largest acceptable angle
# ----------------------------------------------------------------------------

def test_max_theta_meets_target(tuner_tree):
    oracle = error_sample(tuner_tree, sample=400, seed=0)
    theta = max_theta_for_error(tuner_tree, p=4, target_error=1e-3, oracle=oracle)
    assert 0.05 <= theta <= 2.0
    tuner_tree.reset_accumulators()
    dualtree(tuner_tree, p=4, theta=theta)
    assert sampled_force_error(tuner_tree, *oracle) <= 1e-3
    tuner_tree.reset_accumulators()


def test_max_theta_monotone_in_target(tuner_tree):
    oracle = error_sample(tuner_tree, sample=400, seed=0)
    loose = max_theta_for_error(tuner_tree, p=4, target_error=1e-2, oracle=oracle)
    tight = max_theta_for_error(tuner_tree, p=4, target_error=1e-4, oracle=oracle)
    assert tight < loose
    tuner_tree.reset_accumulators()


def test_max_theta_returns_ceiling_for_easy_target(tuner_tree):
    theta = max_theta_for_error(tuner_tree, p=6, target_error=0.9, sample=300)
    assert theta == 2.0
    tuner_tree.reset_accumulators()


def test_max_theta_unreachable(tuner_tree):
    with pytest.raises(ValueError, match="unreachable"):
        max_theta_for_error(tuner_tree, p=3, target_error=1e-18, sample=300)
    tuner_tree.reset_accumulators()


def test_max_theta_rejects_bad_target(tuner_tree):
    with pytest.raises(ValueError, match="positive"):
        max_theta_for_error(tuner_tree, p=4, target_error=0.0)
    with pytest.raises(ValueError, match="positive"):
        max_theta_for_error(tuner_tree, p=4, target_error=-1e-3)


def test_max_theta_oracle_reuse_is_equivalent(tuner_tree):
    oracle = error_sample(tuner_tree, sample=300, seed=0)
    a = max_theta_for_error(tuner_tree, p=3, target_error=1e-2, oracle=oracle)
    b = max_theta_for_error(tuner_tree, p=3, target_error=1e-2, sample=300, seed=0)
    assert a == b
    tuner_tree.reset_accumulators()


# ----------------------------------------------------------------------------
# order selection
# ----------------------------------------------------------------------------

def test_select_p_theta_basic(tuner_tree):
    res = select_p_theta(tuner_tree, 1e-3, p_candidates=(3, 4, 5),
                         sample=400, reps=1)
    assert res.target_error == 1e-3
    assert [e.p for e in res.entries] == [3, 4, 5]
    assert res.best in res.entries
    assert res.best.reachable
    for e in res.entries:
        if e.reachable:
            assert e.error <= 1e-3
            assert e.traversal_time > 0.0
            assert 0.05 <= e.theta <= 2.0
        else:
            assert e.error is None and e.traversal_time is None
    viable = [e for e in res.entries if e.reachable]
    assert res.best.traversal_time == min(e.traversal_time for e in viable)
    tuner_tree.reset_accumulators()


def test_select_p_theta_all_unreachable(tuner_tree):
    with pytest.raises(ValueError, match="every candidate"):
        select_p_theta(tuner_tree, 1e-18, p_candidates=(2, 3), sample=300, reps=1)
    tuner_tree.reset_accumulators()


def test_select_p_theta_generalizes_to_fresh_sample(tuner_tree):
    res = select_p_theta(tuner_tree, 1e-3, p_candidates=(4, 5), sample=400,
                         seed=0, reps=1)
    tuner_tree.reset_accumulators()
    dualtree(tuner_tree, p=res.best.p, theta=res.best.theta)
    fresh = verify_against_direct(tuner_tree, sample=400, seed=99)
    assert fresh <= 2.0 * 1e-3
    tuner_tree.reset_accumulators()


def test_select_p_theta_candidate_order_is_normalized(tuner_tree):
    res = select_p_theta(tuner_tree, 5e-3, p_candidates=(5, 3), sample=300, reps=1)
    assert [e.p for e in res.entries] == [3, 5]
    tuner_tree.reset_accumulators()
