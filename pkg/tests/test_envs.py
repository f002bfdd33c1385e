import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from prefqe.envs import (EnvConfig, PreferenceDataset, TransitionDataset, generate_preference_dataset,
                         generate_transition_dataset, make_embedded_mdp, occupancy_eta, read_manifest,
                         uniform_eta, write_manifest)
from prefqe.errors import DimensionError, SizeError
from prefqe.mdp import Policy, TabularMdp, visitation_distribution


@pytest.fixture(scope="module")
def env():
    return make_embedded_mdp(EnvConfig())


def test_identity_embedding_when_d_equals_D():
    e = make_embedded_mdp(intrinsic_dim=3, ambient_dim=3, distortion=0.0, random_frame=False, num_states=4,
                          num_actions=2)
    assert np.array_equal(e.embedding, e.latent)


def test_determinism_per_seed():
    a, b = make_embedded_mdp(seed=3), make_embedded_mdp(seed=3)
    assert np.array_equal(a.rewards, b.rewards) and np.array_equal(a.embedding, b.embedding)
    assert not np.array_equal(a.rewards, make_embedded_mdp(seed=4).rewards)


def test_pairwise_gap_high_ambient():
    e = make_embedded_mdp(intrinsic_dim=2, ambient_dim=50, num_states=8, num_actions=3)
    flat = e.embedding.reshape(24, 50)
    for i in range(24):
        for j in range(i + 1, 24):
            assert np.linalg.norm(flat[i] - flat[j]) >= 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 7), st.integers(1, 3), st.integers(0, 1000))
def test_structural_invariants(d, extra_dim, dt, seed):
    dt = min(dt, d)
    e = make_embedded_mdp(intrinsic_dim=d, ambient_dim=d + extra_dim, feature_dim=dt, seed=seed)
    assert np.all(np.abs(e.embedding) <= e.bound)
    assert np.all((e.rewards >= 0) & (e.rewards <= 1))
    for h in range(1, e.horizon + 1):
        s, a = e.mdp.anchor[h - 1]
        assert e.rewards[h - 1, s, a] == 0.0
        smooth = e.reward_function(h, e.embedding.reshape(-1, e.ambient_dim)).reshape(e.rewards[h - 1].shape)
        assert np.allclose(smooth, e.rewards[h - 1], atol=1e-12)
        z = e.features(h, e.embedding.reshape(-1, e.ambient_dim))
        assert np.all((z >= 0) & (z <= e.config.feature_bound))


def test_dimension_constraints():
    with pytest.raises(DimensionError):
        EnvConfig(intrinsic_dim=5, ambient_dim=3)
    with pytest.raises(DimensionError):
        EnvConfig(intrinsic_dim=2, feature_dim=3)


def test_transition_size_error(env):
    with pytest.raises(SizeError):
        generate_transition_dataset(env, Policy.uniform(3, 5, 3), 0, seed=0)


def test_single_path_dataset_is_constant(env):
    P = np.zeros((3, 5, 3, 5))
    P[..., 2] = 1.0
    det = dataclasses.replace(env, mdp=TabularMdp(P, env.rewards, 1, env.mdp.anchor))
    data = generate_transition_dataset(det, Policy.deterministic([[0] * 5] * 3, 3), 50, seed=1)
    for h in range(3):
        assert len(set(zip(data.s[h], data.a[h], data.s_next[h]))) == 1


def test_transition_marginals_match_occupancy(env):
    pol = Policy.softmax_random(3, 5, 3, seed=2)
    K = 10**5
    data = generate_transition_dataset(env, pol, K, seed=3)
    q2 = visitation_distribution(env.mdp, pol, 2)
    freq = np.zeros_like(q2)
    np.add.at(freq, (data.s[1], data.a[1]), 1.0 / K)
    assert np.all(np.abs(freq - q2) <= 3 * np.sqrt(q2 * (1 - q2) / K))
    assert data.size == K and data.horizon == 3


def test_successors_follow_transitions(env):
    pol = Policy.uniform(3, 5, 3)
    data = generate_transition_dataset(env, pol, 60_000, seed=4)
    s, a = data.s[0], data.a[0]
    mask = (s == 1) & (a == 2)
    freq = np.bincount(data.s_next[0][mask], minlength=5)
    p = env.mdp.transitions[0, 1, 2]
    assert stats.chisquare(freq[p > 0], p[p > 0] * mask.sum()).pvalue > 0.01


def test_zero_reward_labels_are_uniform():
    e = make_embedded_mdp(reward="zero", anchor=(0, 0))
    prefs = generate_preference_dataset(e, uniform_eta(e), 10**5, seed=5)
    counts = np.bincount(prefs.labels[0], minlength=3)
    assert stats.chisquare(counts).pvalue > 0.01


def test_anchor_frequency_closed_form(env):
    table = np.ones_like(env.rewards)
    eta = uniform_eta(env).copy()
    for h, (s, a) in enumerate(env.mdp.anchor):
        table[h, s, a] = 0.0
        eta[h, s, a] = 0.0
        eta[h] /= eta[h].sum()
    K = 10**5
    prefs = generate_preference_dataset(env, eta, K, seed=6, rewards=table)
    p = 1.0 / (2 * np.e + 1)
    freq = np.mean(prefs.labels[0] == 2)
    assert abs(p - 0.1554) < 5e-5
    assert abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / K)


def test_preference_determinism_and_anchor_slot(env):
    eta = occupancy_eta(env, Policy.uniform(3, 5, 3))
    a = generate_preference_dataset(env, eta, 500, seed=7)
    b = generate_preference_dataset(env, eta, 500, seed=7)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.cand_s, b.cand_s)
    for h in range(1, 4):
        s, act = a.candidate_indices(h)
        assert np.all(s[:, 2] == env.mdp.anchor[h - 1, 0]) and np.all(act[:, 2] == env.mdp.anchor[h - 1, 1])


def test_shifted_rewards_leave_labels_unchanged(env):
    eta = uniform_eta(env)
    base = generate_preference_dataset(env, eta, 20_000, seed=8)
    for c in (0.5, -3.0, 7.25):
        shifted = generate_preference_dataset(env, eta, 20_000, seed=8, reward_offset=c)
        assert np.array_equal(base.labels, shifted.labels)


def test_candidate_marginals_match_eta(env):
    eta = occupancy_eta(env, Policy.softmax_random(3, 5, 3, seed=1))
    K = 50_000
    prefs = generate_preference_dataset(env, eta, K, seed=9)
    freq = np.zeros((5, 3))
    np.add.at(freq, (prefs.cand_s[2].ravel(), prefs.cand_a[2].ravel()), 1.0 / (2 * K))
    se = np.sqrt(eta[2] * (1 - eta[2]) / (2 * K))
    assert np.all(np.abs(freq - eta[2]) <= 4 * se + 1e-15)


def test_preference_size_error(env):
    with pytest.raises(SizeError):
        generate_preference_dataset(env, uniform_eta(env), 0, seed=0)


def test_csv_round_trips(env, tmp_path):
    t = generate_transition_dataset(env, Policy.uniform(3, 5, 3), 40, seed=10)
    t.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert header == ["h", "k"] + [f"x{i}" for i in range(10)] + ["sprime_index"]
    back = TransitionDataset.from_csv(tmp_path / "t.csv", env)
    assert np.array_equal(back.s, t.s) and np.array_equal(back.a, t.a) and np.array_equal(back.s_next, t.s_next)

    p = generate_preference_dataset(env, uniform_eta(env), 40, seed=11)
    p.to_csv(tmp_path / "p.csv")
    header = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["h", "k", "cand0_0"] and header[-1] == "label" and len(header) == 23
    back = PreferenceDataset.from_csv(tmp_path / "p.csv", env)
    assert np.array_equal(back.labels, p.labels) and np.array_equal(back.cand_s, p.cand_s)
    assert np.array_equal(back.cand_a, p.cand_a)


def test_manifest_round_trip(tmp_path):
    cfg = EnvConfig(seed=12, anchor=(1, 2))
    write_manifest(tmp_path / "m.json", cfg, seed=12, K=100)
    m = read_manifest(tmp_path / "m.json")
    assert EnvConfig.from_dict(m["env"]) == cfg and m["seed"] == 12 and m["K"] == 100
