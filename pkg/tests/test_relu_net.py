import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import max_relative_error, random_batch, random_net
from prefqe.errors import DimensionError, TrainingDivergence
from prefqe.relu_net import (ChoiceLoss, NetConfig, OptimizerConfig, ReluNetwork, SquaredLoss, forward,
                             loss_gradient, loss_value, paper_scaling, project, train)


def reference_forward(weights, biases, lo, hi, x):
    """Plain loop over neurons, written independently of the vectorized engine."""
    h = list(x)
    for li, (W, b) in enumerate(zip(weights, biases)):
        nxt = []
        for i in range(len(b)):
            z = b[i] + sum(W[i][j] * h[j] for j in range(len(h)))
            nxt.append(z if li == len(weights) - 1 else max(z, 0.0))
        h = nxt
    return min(max(h[0], lo), hi)


def test_zero_network_outputs_zero():
    net = ReluNetwork([np.zeros((4, 3)), np.zeros((1, 4))], [np.zeros(4), np.zeros(1)], 1.0, -1, 1)
    assert np.all(net(np.random.default_rng(0).normal(size=(20, 3))) == 0.0)


def test_affine_clip_example():
    net = ReluNetwork([[[2.0]]], [[0.0]], tau=10.0, out_low=-1.0, out_high=1.0)
    assert forward(net, np.array([3.0])) == 1.0


def test_forward_matches_reference_loop():
    rng = np.random.default_rng(1)
    net = ReluNetwork.initialize(5, NetConfig(2, 8, 10.0, -3, 3), seed=4)
    net.weights[-1] = rng.normal(size=(1, 8))
    x = rng.normal(size=(100, 5))
    ours = net(x)
    ref = [reference_forward([W.tolist() for W in net.weights], [b.tolist() for b in net.biases], -3, 3, row)
           for row in x.tolist()]
    assert np.max(np.abs(ours - ref)) <= 1e-10


def test_dimension_mismatch():
    net = ReluNetwork.initialize(3, NetConfig(), seed=0)
    with pytest.raises(DimensionError):
        net(np.zeros(4))


def test_zero_residual_zero_gradient():
    net = ReluNetwork.initialize(2, NetConfig(2, 6, 10.0, -5, 5), seed=1)
    x = np.random.default_rng(2).normal(size=(10, 2))
    _, grads = loss_gradient(net, SquaredLoss(x, net(x)))
    assert all(not np.any(g) for g in grads)


def test_doubled_targets_scale_output_gradient():
    rng = np.random.default_rng(3)
    net = ReluNetwork.initialize(2, NetConfig(1, 5, 10.0, -100, 100), seed=2)
    x = rng.normal(size=(20, 2))
    net.biases[-1][:] = 0.0
    net.weights[-1][:] = 0.0  # output identically zero, so residuals are -y
    y = rng.normal(size=20)
    _, g1 = loss_gradient(net, SquaredLoss(x, y))
    _, g2 = loss_gradient(net, SquaredLoss(x, 2 * y))
    assert np.max(np.abs(g2[-1] - 2 * g1[-1])) <= 1e-10
    assert np.max(np.abs(g2[-2] - 2 * g1[-2])) <= 1e-10


@pytest.mark.parametrize("kind", ["squared", "choice"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7 if kind == "squared" else 8)
    for _ in range(5):
        net = random_net(rng, int(rng.integers(1, 5)))
        assert max_relative_error(net, random_batch(rng, net, kind)) <= 1e-4


def test_projection_examples():
    net = ReluNetwork([[[2.0, -0.5]]], [[0.1]], tau=1.0, out_low=-1, out_high=1)
    p = project(net)
    assert p.weights[0][0, 0] == 1.0 and p.weights[0][0, 1] == -0.5 and p.biases[0][0] == 0.1
    assert project(p).equals(p)


def test_projection_idempotent_on_random_nets():
    rng = np.random.default_rng(9)
    for i in range(100):
        net = ReluNetwork.initialize(3, NetConfig(2, 4, 0.3, -1, 1), seed=i)
        for W in net.weights:
            W += rng.normal(0, 1, size=W.shape)
        once = project(net)
        assert once.within_bounds()
        assert project(once).equals(once)


def test_train_affine_target():
    x = np.linspace(-1, 1, 100)[:, None]
    loss = SquaredLoss(x, 2 * x[:, 0] + 1)
    net = train(ReluNetwork.initialize(1, NetConfig(0, 1, 10.0, -10, 10), 0), loss,
                OptimizerConfig(learning_rate=1e-2, epochs=3000, final_lr_fraction=0.01))
    assert loss_value(net, loss) <= 1e-6


def test_train_sine_regression_baseline():
    x = np.linspace(0, 1, 2000)[:, None]
    loss = SquaredLoss(x, np.sin(2 * np.pi * x[:, 0]))
    net = train(ReluNetwork.initialize(1, NetConfig(2, 32, 10.0, -1, 1), 0), loss,
                OptimizerConfig(learning_rate=1e-3, epochs=4000))
    assert loss_value(net, loss) <= 1e-3
    assert net.within_bounds()
    assert np.all(np.abs(net(np.random.default_rng(0).normal(0, 10, size=(10**5, 1)))) <= 1.0)


def test_training_is_deterministic_and_returns_best():
    rng = np.random.default_rng(4)
    c = rng.normal(size=(300, 3, 2))
    loss = ChoiceLoss(c, rng.integers(0, 3, 300))
    opt = OptimizerConfig(learning_rate=1e-2, epochs=60, batch_size=64, seed=3)
    a, hist = train(ReluNetwork.initialize(2, NetConfig(2, 8, 2.0, 0, 1), 5), loss, opt, return_history=True)
    b = train(ReluNetwork.initialize(2, NetConfig(2, 8, 2.0, 0, 1), 5), loss, opt)
    assert a.equals(b)
    assert loss_value(a, loss) == min(hist)
    assert a.within_bounds()


def test_non_finite_loss_aborts():
    x = np.ones((4, 1))
    net = ReluNetwork.initialize(1, NetConfig(1, 2, 10.0, -1, 1), 0)
    with pytest.raises(TrainingDivergence):
        train(net, SquaredLoss(x, np.array([1.0, np.inf, 0.0, 0.0])), OptimizerConfig(epochs=3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(0.1, 5))
def test_output_bound_invariant(seed, shift, spread):
    net = ReluNetwork.initialize(2, NetConfig(2, 6, 10.0, 0.0, 1.0), seed)
    net.weights[-1] *= 100
    x = np.random.default_rng(seed).normal(shift, spread, size=(2000, 2))
    out = net(x)
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_checkpoint_round_trip():
    net = ReluNetwork.initialize(3, NetConfig(2, 5, 4.0, -2, 2), 11)
    text = net.to_json()
    d = json.loads(text)
    assert d["format"] == "prefqe-relu" and d["version"] == 1 and d["widths"] == [3, 5, 5, 1]
    assert ReluNetwork.from_json(text).equals(net)
    d["version"] = 99
    with pytest.raises(ValueError):
        ReluNetwork.from_dict(d)


def test_paper_scaling_grows_with_samples():
    small, _ = paper_scaling(100, 2, 2.0)
    big, budget = paper_scaling(10_000, 2, 2.0)
    assert big.width > small.width and big.hidden_layers >= small.hidden_layers and budget > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0), st.sampled_from(["adam", "gd"]), st.integers(1, 7))
def test_constraints_hold_after_training(seed, tau, method, every):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(64, 3))
    data = SquaredLoss(x, 5 * rng.normal(size=64))
    net = ReluNetwork.initialize(3, NetConfig(2, 8, tau, -1.0, 1.0), seed)
    opt = OptimizerConfig(learning_rate=0.05, epochs=30, seed=seed, method=method, project_every=every)
    trained = train(net, data, opt)
    assert all(np.abs(p).max() <= tau for p in trained.parameters())
    assert np.all(np.abs(trained(rng.normal(0, 10, size=(500, 3)))) <= 1.0)
