import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefqe.divergence import (FiniteDistribution, ProbeClass, angle_grid_probes, default_probes, kappa_profile,
                               pearson_chi_square, probe_ratios, restricted_chi_square, sign_pattern_probes,
                               verify_shift_bound)
from prefqe.envs import make_embedded_mdp, occupancy_eta
from prefqe.errors import SupportError
from prefqe.mdp import Policy, TabularMdp


def simplex(rng, n, zeros=0):
    p = rng.dirichlet(np.ones(n))
    if zeros:
        p[rng.choice(n, zeros, replace=False)] = 0
        p /= p.sum()
    return p


def test_pearson_examples():
    assert pearson_chi_square([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert abs(pearson_chi_square([0.5, 0.5], [0.25, 0.75]) - 1 / 3) <= 1e-15
    assert abs(pearson_chi_square([1.0, 0.0], [0.5, 0.5]) - 1.0) <= 1e-15


def test_pearson_brute_force_two_point():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    brute = sum(q[x] * (p[x] / q[x] - 1) ** 2 for x in range(2))
    assert abs(pearson_chi_square(p, q) - brute) <= 1e-15


def test_pearson_support_error_names_atom():
    q = FiniteDistribution([0.5, 0.5, 0.0], labels=("a", "b", "c"))
    with pytest.raises(SupportError) as info:
        pearson_chi_square([0.2, 0.2, 0.6], q)
    assert info.value.atom == "c" and "'c'" in str(info.value)
    assert pearson_chi_square([0.5, 0.5, 0.0], q) == 0.0  # 0/0 = 0


def test_distribution_validation():
    with pytest.raises(ValueError):
        FiniteDistribution([0.5, 0.6])
    with pytest.raises(ValueError):
        ProbeClass([[1.0, np.inf]])


def test_equal_distributions():
    rng = np.random.default_rng(0)
    q = simplex(rng, 6)
    probes = ProbeClass(rng.normal(size=(30, 6)))
    assert restricted_chi_square(q, q, probes) <= 1e-12
    with_const = probes.union(ProbeClass(np.ones((1, 6))))
    assert abs(restricted_chi_square(q, q, with_const)) <= 1e-12


def test_sign_patterns_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q1, q2 = simplex(rng, 8), simplex(rng, 8)
        best = -np.inf
        for signs in itertools.product((-1.0, 1.0), repeat=8):
            f = np.array(signs)
            best = max(best, (f @ q1) ** 2 / ((f * f) @ q2))
        assert abs(restricted_chi_square(q1, q2, sign_pattern_probes(8)) - (best - 1)) <= 1e-12


def test_angle_grid_approaches_pearson():
    rng = np.random.default_rng(2)
    grid = angle_grid_probes(10**4)
    # a 10^4 sweep resolves the peak only while q2 keeps some mass on both points
    for _ in range(50):
        q1, q2 = simplex(rng, 2), 0.02 + 0.96 * simplex(rng, 2)
        full = pearson_chi_square(q1, q2)
        got = restricted_chi_square(q1, q2, grid)
        assert full - 1e-3 <= got <= full + 1e-9


def test_zero_denominator_conventions():
    probes = ProbeClass([[0.0, 1.0], [1.0, 1.0]])
    assert restricted_chi_square([1.0, 0.0], [1.0, 0.0], probes) == 0.0  # first probe is 0/0, skipped
    assert restricted_chi_square([0.5, 0.5], [1.0, 0.0], probes) == np.inf
    with pytest.raises(ValueError):
        restricted_chi_square([1.0, 0.0], [1.0, 0.0], ProbeClass([[0.0, 1.0]]))
    r = probe_ratios([1.0, 0.0], [1.0, 0.0], probes)
    assert np.isnan(r[0]) and r[1] == 1.0


def test_shift_bound_examples():
    q = np.array([0.2, 0.3, 0.5])
    probes = ProbeClass(np.ones((1, 3)))
    holds, slack = verify_shift_bound(np.ones(3), q, q, probes)
    assert holds and abs(slack) <= 1e-15
    g = np.array([0.0, 0.0, 1.0])
    holds, _ = verify_shift_bound(g, [0.5, 0.5, 0.0], [0.4, 0.6, 0.0], ProbeClass(np.vstack([g, np.ones(3)])))
    assert holds


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_shift_bound_holds_for_member_probes(seed, zeros):
    rng = np.random.default_rng(seed)
    q1, q2 = simplex(rng, 8), simplex(rng, 8, zeros)
    probes = ProbeClass(rng.normal(size=(5, 8)))
    g = probes.values[rng.integers(0, 5)]
    assert verify_shift_bound(g, q1, q2, probes)[0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_restricted_below_pearson_and_monotone(seed, n):
    rng = np.random.default_rng(seed)
    q1, q2 = simplex(rng, n), simplex(rng, n)
    small = ProbeClass(rng.normal(size=(4, n)))
    big = small.union(ProbeClass(rng.normal(size=(20, n))))
    a, b = restricted_chi_square(q1, q2, small), restricted_chi_square(q1, q2, big)
    assert a <= b
    assert b <= pearson_chi_square(q1, q2) + 1e-9


def two_state_mdp():
    P = np.zeros((2, 2, 1, 2))
    P[0, 0, 0] = [0.8, 0.2]
    P[0, 1, 0] = [0.4, 0.6]
    P[1] = 0.5
    return TabularMdp(P, np.zeros((2, 2, 1)), [0.5, 0.5], [[0, 0], [0, 0]])


def test_kappa_hand_calculation():
    mdp = two_state_mdp()
    pol = Policy.uniform(2, 2, 1)
    # occupancies: step 1 is xi = (0.5, 0.5); step 2 is (0.6, 0.4)
    eta = np.array([[[0.25], [0.75]], [[0.5], [0.5]]])
    k1, k2, rows = kappa_profile(mdp, pol, pol, eta, angle_grid_probes(10**4))
    chi_1 = 0.25 ** 2 / 0.25 + 0.25 ** 2 / 0.75
    chi_2 = 0.1 ** 2 / 0.5 * 2
    assert abs(k1 - 2.0) <= 1e-12
    assert abs(k2 - (np.sqrt(1 + chi_1) + np.sqrt(1 + chi_2))) <= 1e-3
    assert [r["kind"] for r in rows] == ["kappa1", "kappa2"] * 2


def test_kappa_zero_shift_equals_horizon():
    env = make_embedded_mdp()
    pol = Policy.softmax_random(3, 5, 3, seed=4)
    k1, k2, _ = kappa_profile(env.mdp, pol, pol, occupancy_eta(env, pol), default_probes(env))
    assert abs(k1 - 3) <= 1e-12 and abs(k2 - 3) <= 1e-12


def test_kappa_grows_with_probe_set():
    env = make_embedded_mdp()
    target, behavior = Policy.softmax_random(3, 5, 3, seed=1), Policy.uniform(3, 5, 3)
    eta = occupancy_eta(env, behavior)
    small = default_probes(env, n_nets=4)
    big = small.union(ProbeClass(np.random.default_rng(0).normal(size=(50, 15))))
    a = kappa_profile(env.mdp, target, behavior, eta, small)
    b = kappa_profile(env.mdp, target, behavior, eta, big)
    assert b[0] >= a[0] and b[1] >= a[1]


def test_default_probes_are_finite_and_include_constant():
    env = make_embedded_mdp()
    probes = default_probes(env)
    assert probes.names[0] == "const" and np.all(probes.values[0] == 1.0)
    assert sum(n.startswith("relu") for n in probes.names) == 64
    assert np.all(np.isfinite(probes.values))
