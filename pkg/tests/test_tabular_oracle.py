import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parslab.tabular_oracle import (
    ID,
    OOD_IN,
    OOD_OUT,
    TabularMdp,
    apply_t_pars,
    build_random_mdp,
    certify,
    fixed_point_iterate,
    iteration_bound,
    knn_table,
    label_regions,
    policy_backup,
    policy_evaluation_exact,
    verify_contraction,
)


def brute_force_labels(support, embed):
    S, A = support.shape
    out = np.empty((S, A), dtype=int)
    for s in range(S):
        ids = [embed[a] for a in range(A) if support[s, a]]
        for a in range(A):
            if support[s, a]:
                out[s, a] = ID
            elif ids and min(ids) <= embed[a] <= max(ids):
                out[s, a] = OOD_IN
            else:
                out[s, a] = OOD_OUT
    return out


def test_full_support_is_all_id():
    _, labels = build_random_mdp(4, 5, 1.0, 0)
    assert np.all(labels.labels == ID)


def test_extreme_actions_make_middle_ood_in():
    support = np.zeros((3, 5), dtype=bool)
    support[:, [0, 4]] = True
    labels = label_regions(support, np.linspace(-1, 1, 5))
    assert np.all(labels.labels[:, 1:4] == OOD_IN)
    assert not np.any(labels.labels == OOD_OUT)


@pytest.mark.parametrize("seed", range(100))
def test_labels_match_membership_oracle(seed):
    rng = np.random.default_rng(seed)
    mdp, labels = build_random_mdp(int(rng.integers(2, 7)), int(rng.integers(2, 9)), float(rng.uniform(0.1, 1.0)), seed)
    np.testing.assert_array_equal(labels.labels, brute_force_labels(labels.support, mdp.action_embed))
    assert labels.support.any(axis=1).all()


@pytest.mark.parametrize("kwargs", [dict(n_states=1, n_actions=3, support_density=0.5), dict(n_states=3, n_actions=3, support_density=0.0)])
def test_build_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        build_random_mdp(seed=0, **kwargs)


def test_mdp_rejects_non_stochastic_rows():
    mdp, _ = build_random_mdp(3, 3, 0.5, 0)
    with pytest.raises(ValueError):
        TabularMdp(mdp.P * 2, mdp.R, mdp.gamma, mdp.pi, mdp.action_embed)


def test_all_id_operator_is_policy_backup():
    mdp, labels = build_random_mdp(4, 3, 1.0, 2)
    q = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(apply_t_pars(q, mdp, labels), policy_backup(q, mdp))


def test_policy_backup_by_explicit_sums():
    mdp, _ = build_random_mdp(3, 2, 1.0, 5)
    q = np.random.default_rng(1).normal(size=(3, 2))
    expected = np.zeros((3, 2))
    for s in range(3):
        for a in range(2):
            nxt = sum(mdp.P[s, a, s2] * sum(mdp.pi[s2, a2] * q[s2, a2] for a2 in range(2)) for s2 in range(3))
            expected[s, a] = mdp.R[s, a] + mdp.gamma * nxt
    np.testing.assert_allclose(policy_backup(q, mdp), expected, atol=1e-14)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ood_out_entries_equal_q_min(seed):
    mdp, labels = build_random_mdp(5, 6, 0.3, seed)
    q = np.random.default_rng(seed).normal(scale=100, size=(5, 6))
    out = apply_t_pars(q, mdp, labels)
    assert np.all(out[labels.labels == OOD_OUT] == mdp.q_min)


def test_k1_matches_nearest_neighbor_scan():
    for seed in range(20):
        mdp, labels = build_random_mdp(5, 7, 0.35, seed)
        q = np.random.default_rng(seed).normal(size=(5, 7))
        out = apply_t_pars(q, mdp, labels, k=1)
        tq = policy_backup(q, mdp)
        for s, a in zip(*np.nonzero(labels.labels == OOD_IN)):
            best, best_d = None, math.inf
            for s2 in range(5):
                for a2 in range(7):
                    if labels.labels[s2, a2] != ID:
                        continue
                    d = abs(s - s2) + abs(mdp.action_embed[a] - mdp.action_embed[a2])
                    if d < best_d:  # strict: the first (lowest index) minimum wins ties
                        best, best_d = (s2, a2), d
            assert out[s, a] == tq[best]


def test_knn_tie_break_prefers_lowest_index():
    support = np.zeros((3, 3), dtype=bool)
    support[0, [0, 2]] = True
    support[1, 1] = True
    support[2, [0, 2]] = True
    embed = np.array([-1.0, 0.0, 1.0])
    labels = label_regions(support, embed)
    mdp, _ = build_random_mdp(3, 3, 1.0, 0)
    mdp = TabularMdp(mdp.P, mdp.R, mdp.gamma, mdp.pi, embed)
    # (0,1) is at distance 1 from (0,0), (0,2) and (1,1); k=1 picks (0,0).
    table = knn_table(mdp, labels, 1)
    assert list(table[(0, 1)]) == [0]
    assert list(knn_table(mdp, labels, 3)[(0, 1)]) == [0, 2, 4]


def test_contraction_skips_identical_pairs():
    mdp, labels = build_random_mdp(3, 3, 0.5, 0)
    assert verify_contraction(mdp, labels, 3, 1, 0) <= mdp.gamma + 1e-12
    with pytest.raises(ValueError):
        verify_contraction(mdp, labels, 3, 0, 0)


@given(st.integers(0, 2**20), st.floats(0.05, 0.99), st.floats(0.1, 1.0), st.integers(1, 4))
@settings(max_examples=100, deadline=None)
def test_contraction_property(seed, gamma, density, k):
    mdp, labels = build_random_mdp(4, 5, density, seed, gamma=gamma)
    # 100 examples x 100 trials = 10^4 (instance, pair) draws
    assert verify_contraction(mdp, labels, k, 100, seed) <= gamma + 1e-12


def test_gamma_zero_converges_in_one_iteration():
    mdp, labels = build_random_mdp(4, 5, 0.4, 3, gamma=0.0)
    fp = fixed_point_iterate(mdp, labels, 3, 1e-12)
    assert fp.iterations == 1
    np.testing.assert_array_equal(fp.Q, apply_t_pars(np.zeros((4, 5)), mdp, labels))


@pytest.mark.parametrize("seed", range(10))
def test_all_id_fixed_point_matches_linear_solve(seed):
    mdp, labels = build_random_mdp(5, 4, 1.0, seed, gamma=0.9)
    fp = fixed_point_iterate(mdp, labels, 3, 1e-12)
    np.testing.assert_allclose(fp.Q, policy_evaluation_exact(mdp), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_residuals_decay_geometrically(seed):
    mdp, labels = build_random_mdp(6, 7, 0.4, seed, gamma=0.95)
    fp = fixed_point_iterate(mdp, labels, 3, 1e-10)
    res = np.array(fp.residuals)
    assert len(res) >= 10
    assert np.all(res[2:] <= res[1:-1] * (1 + 1e-12) + 1e-15)
    ratios = res[1:] / res[:-1]
    assert np.all(ratios[np.isfinite(ratios)] <= mdp.gamma + 1e-9)
    assert fp.iterations <= iteration_bound(mdp.gamma, 1e-10, res[0])


def test_fixed_point_rejects_bad_tol():
    mdp, labels = build_random_mdp(3, 3, 0.5, 0)
    with pytest.raises(ValueError):
        fixed_point_iterate(mdp, labels, 3, 0.0)


def test_certify_rows():
    rows = certify(3, 10, 0)
    assert len(rows) == 3
    assert all(r.max_ratio <= r.gamma + 1e-12 for r in rows)
    assert all(r.max_decay <= r.gamma + 1e-9 for r in rows)
