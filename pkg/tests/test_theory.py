import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upesi import theory as T


def mdp_pair(seed):
    rng = np.random.default_rng(seed)
    return T.random_mdp(rng), T.random_mdp(rng)


def test_invalid_stochastic_tensors_rejected():
    m = T.random_mdp(0)
    bad = m.T.copy()
    bad[0, 0, 0, 0] += 0.1
    with pytest.raises(ValueError):
        T.TabularRDMDP(bad, m.policy, m.prior, m.init)
    with pytest.raises(ValueError):
        T.TabularRDMDP(m.T, m.policy, m.prior, m.init, horizon=0)


def test_single_state_collapse():
    m = T.random_mdp(3, n_states=1)
    occ = T.compute_occupancies(m)
    expected = m.prior[None, None, :] * np.transpose(m.policy, (0, 2, 1))
    np.testing.assert_allclose(occ.sat, expected, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), horizon=st.integers(1, 8))
def test_marginal_consistency(seed, horizon):
    m = T.random_mdp(seed, horizon=horizon)
    occ = T.compute_occupancies(m)
    assert abs(occ.joint.sum() - 1) < 1e-12
    np.testing.assert_allclose(occ.joint.sum(axis=2), occ.sas, atol=1e-12)
    np.testing.assert_allclose(occ.joint.sum(axis=(1, 2)), occ.ss, atol=1e-12)
    np.testing.assert_allclose(occ.sat * 1.0, occ.joint.sum(axis=3), atol=1e-12)
    # joint factorizes as rho(s, a, theta) T(s' | s, a, theta)
    np.testing.assert_allclose(occ.joint, occ.sat[..., None] * m.T, atol=1e-15)


def test_occupancy_matches_monte_carlo():
    m = T.random_mdp(1)
    occ = T.compute_occupancies(m)
    emp, se = T.monte_carlo_joint(m, 1_000_000, 2)
    live = occ.joint > 0
    z = np.abs(emp - occ.joint)[live] / se[live]
    assert z.max() < 3.0


def test_estimated_dynamics_uninformative_transitions():
    m = T.random_mdp(4, theta_dependent=False, policy_theta_dependent=False)
    est = T.estimated_dynamics(T.compute_occupancies(m))
    post = np.moveaxis(est.posterior, 2, -1)[est.defined]
    np.testing.assert_allclose(post, np.broadcast_to(m.prior, post.shape), atol=1e-12)


def test_estimated_dynamics_hand_bayes_two_states():
    rng = np.random.default_rng(7)
    m = T.random_mdp(rng, n_states=2, n_actions=2, n_dynamics=2, horizon=3)
    occ = T.compute_occupancies(m)
    est = T.estimated_dynamics(occ)
    # brute force: every (theta, full trajectory) spreads its probability over its H steps
    H = 3
    joint = np.zeros((2, 2, 2, 2))
    for k in range(2):
        for traj in itertools.product(range(2), repeat=2 * H + 1):
            states, actions = traj[0::2], traj[1::2]
            p = m.prior[k] * m.init[states[0]]
            for t in range(H):
                p *= m.policy[states[t], k, actions[t]] * m.T[states[t], actions[t], k, states[t + 1]]
            for t in range(H):
                joint[states[t], actions[t], k, states[t + 1]] += p / H
    np.testing.assert_allclose(joint, occ.joint, atol=1e-14)
    bayes = joint / joint.sum(axis=2, keepdims=True)
    np.testing.assert_allclose(est.posterior, bayes, atol=1e-12)
    np.testing.assert_allclose(np.nansum(est.posterior, axis=2)[est.defined], 1.0, atol=1e-12)


def test_kl_values():
    p = np.array([0.5, 0.5])
    assert T.kl_tabular(p, p) == 0.0
    assert abs(T.kl_tabular(p, [0.25, 0.75]) - 0.143841) < 1e-6
    assert abs(T.kl_tabular(p, [0.25, 0.75]) - (0.5 * np.log(2) + 0.5 * np.log(2 / 3))) < 1e-15
    assert T.kl_tabular([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2))


def test_kl_rejects_absolute_continuity_violation():
    with pytest.raises(ValueError, match=r"index \(1,\)"):
        T.kl_tabular([0.5, 0.5], [1.0, 0.0])


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(2, 10)
        assert T.kl_tabular(rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))) >= 0.0


@pytest.mark.parametrize("seed", range(10))
def test_chain_rule_identity(seed):
    a, b = mdp_pair(seed)
    for axis in (0, 1, 2, 3):
        assert T.chain_rule_gap(a, b, axis) < 1e-10


def test_posterior_kl_identical_and_constructed():
    m = T.random_mdp(5)
    assert T.verify_lemma2(m, m) == (0.0, 0.0, 0.0)
    src, tgt = T.equal_marginal_pair(6)
    lhs, rhs, gap = T.verify_lemma2(src, tgt)
    assert lhs > 0 and gap < 1e-10


def test_posterior_kl_premise_checked():
    a, b = mdp_pair(8)
    with pytest.raises(ValueError, match="marginals differ"):
        T.verify_lemma2(a, b)


def test_posterior_kl_relabelled_mdp():
    m = T.random_mdp(9)
    lhs, rhs, gap = T.verify_lemma2(m, T.relabelled_mdp(m, [2, 0, 1]))
    assert lhs > 0 and gap < 1e-10


def test_forward_kl_identity_cases():
    m = T.random_mdp(10)
    assert T.verify_lemma4(m, m)[2] == 0.0
    a, b = mdp_pair(11)
    assert T.verify_lemma4(a, b)[2] < 1e-10
    rng = np.random.default_rng(12)
    src = T.random_mdp(rng)
    tgt = T.random_mdp(rng, theta_dependent=False)
    lhs, rhs, gap = T.verify_lemma4(src, tgt)
    assert lhs > 0 and rhs > 0 and gap < 1e-10


def test_posterior_bounds_forward_cases():
    m = T.random_mdp(13)
    assert T.verify_theorem5(m, m)[2] == 0.0
    src, tgt = T.shared_marginals_pair(14)
    np.testing.assert_allclose(src.sas, tgt.sas, atol=1e-15)
    np.testing.assert_allclose(src.sat, tgt.sat, atol=1e-15)
    est, fwd, margin = T.verify_theorem5(src, tgt)
    assert est > 0 and abs(margin) < 1e-10


def test_suite_rows_all_pass():
    rows = T.run_suite(20, seed=3)
    assert len(rows) == 6 and all(r[-1] for r in rows)
