"""Feed-forward ReLU networks with bounded weights and clipped outputs.

A network of ``hidden_layers`` hidden layers of width ``width`` computes

    W_L relu(... relu(W_1 x + b_1) ...) + b_L

and clips the result into ``[out_low, out_high]``. Training is mini-batch
gradient descent (plain or Adam) followed by entrywise projection of every
weight and bias into ``[-tau, tau]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SizeError, TrainingDivergence
from .preference import choice_probabilities, log_sum_exp

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    hidden_layers: int = 2
    width: int = 32
    tau: float = 10.0
    out_low: float = -1.0
    out_high: float = 1.0
    init_output: float | None = None  # output-bias init; defaults to the interval midpoint

    def __post_init__(self):
        if self.hidden_layers < 0 or self.width < 1:
            raise ValueError("need hidden_layers >= 0 and width >= 1")
        if not self.tau > 0 or not self.out_low < self.out_high:
            raise ValueError("need tau > 0 and out_low < out_high")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    batch_size: int | None = None  # None: full batch
    epochs: int = 1000
    seed: int = 0
    project_every: int = 1
    method: str = "adam"  # "adam" or "gd"
    final_lr_fraction: float = 1.0  # geometric decay of the step size over training

    def __post_init__(self):
        if not self.learning_rate > 0 or self.epochs < 1 or self.project_every < 1:
            raise ValueError("learning rate, epochs and projection cadence must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.method not in ("adam", "gd"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.final_lr_fraction <= 1:
            raise ValueError("final_lr_fraction must be in (0, 1]")


def paper_scaling(n, intrinsic_dim, smoothness, *, bound=1.0, reach=1.0, out_low=None, out_high=1.0,
                  width_scale=1.0, depth_scale=1.0, feature_dim=None, max_width=256):
    """Architecture sized like the theory's ReLU classes for ``n`` samples.

    Depth grows like a/(2a+d) log n and width like n^{d/(2a+d)} (times the
    feature dimension when one is given, as for reward classes). Returns
    ``(NetConfig, nonzero_budget)``; the budget is reported, not enforced.
    """
    a, d = float(smoothness), float(intrinsic_dim)
    rate = a / (2 * a + d)
    layers = max(1, math.ceil(depth_scale * rate * math.log(n)))
    width = width_scale * n ** (d / (2 * a + d))
    if feature_dim is not None:
        width *= feature_dim
    width = int(min(max_width, max(2, math.ceil(width))))
    tau = max(bound, 1.0, math.sqrt(feature_dim or intrinsic_dim), reach ** 2)
    budget = math.ceil(rate * n ** (d / (2 * a + d)) * math.log(n) * (feature_dim or 1))
    cfg = NetConfig(hidden_layers=max(1, layers - 1), width=width, tau=tau,
                    out_low=-out_high if out_low is None else out_low, out_high=out_high)
    return cfg, budget


class ReluNetwork:
    """Parameters are lists of weight matrices (out, in) and bias vectors."""

    def __init__(self, weights, biases, tau, out_low, out_high):
        if len(weights) != len(biases) or not weights:
            raise DimensionError("need one bias per weight matrix")
        self.weights = [np.array(W, dtype=float) for W in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i} input width does not match layer {i - 1}")
        if self.weights[-1].shape[0] != 1:
            raise DimensionError("output layer must have width 1")
        self.tau = float(tau)
        self.out_low = float(out_low)
        self.out_high = float(out_high)

    @classmethod
    def initialize(cls, input_dim, config: NetConfig, seed) -> "ReluNetwork":
        """He-normal weights, uniform(-1, 1) hidden biases so kinks spread over
        the input range, and a small output layer with a centered bias."""
        rng = np.random.default_rng(seed)
        widths = [input_dim] + [config.width] * config.hidden_layers + [1]
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            scale = (0.1 if last and config.hidden_layers else 1.0) * math.sqrt(2.0 / n_in)
            weights.append(rng.normal(0.0, scale, size=(n_out, n_in)))
            biases.append(np.zeros(n_out) if last else rng.uniform(-1.0, 1.0, size=n_out))
        init_out = config.init_output
        if init_out is None:
            init_out = 0.5 * (config.out_low + config.out_high)
        biases[-1][:] = init_out
        return project(cls(weights, biases, config.tau, config.out_low, config.out_high))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def widths(self) -> list:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def copy(self) -> "ReluNetwork":
        return ReluNetwork([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                           self.tau, self.out_low, self.out_high)

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def nonzeros(self) -> int:
        return int(sum(np.count_nonzero(p) for p in self.parameters()))

    def within_bounds(self) -> bool:
        return all(np.all(np.abs(p) <= self.tau) for p in self.parameters())

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)

    def equals(self, other) -> bool:
        return (self.tau, self.out_low, self.out_high) == (other.tau, other.out_low, other.out_high) \
            and all(np.array_equal(p, q) for p, q in zip(self.parameters(), other.parameters()))

    # -- checkpoints ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "prefqe-relu", "version": CHECKPOINT_VERSION,
            "widths": self.widths, "tau": self.tau, "out_low": self.out_low, "out_high": self.out_high,
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> "ReluNetwork":
        if d.get("format") != "prefqe-relu" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint format")
        widths = d["widths"]
        weights = [np.array(w, dtype=float).reshape(n_out, n_in)
                   for w, n_in, n_out in zip(d["weights"], widths[:-1], widths[1:])]
        return cls(weights, d["biases"], d["tau"], d["out_low"], d["out_high"])

    def to_json(self) -> str:
        from .mdp import dumps_17g
        return dumps_17g(self.to_dict())

    @classmethod
    def from_json(cls, text) -> "ReluNetwork":
        return cls.from_dict(json.loads(text))


def _as_batch(net, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.input_dim:
        raise DimensionError(f"input has dimension {x.shape[1]}, network expects {net.input_dim}")
    return x, single


def _forward_cache(net, x):
    acts, pre = [x], []
    h = x
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    out = (h @ net.weights[-1].T + net.biases[-1])[:, 0]
    return out, acts, pre


def forward(net: ReluNetwork, x):
    """Network output for one input vector or a batch of rows."""
    x, single = _as_batch(net, x)
    out, _, _ = _forward_cache(net, x)
    out = np.clip(out, net.out_low, net.out_high)
    return float(out[0]) if single else out


def min_kink_distance(net, x) -> float:
    """Smallest distance of any hidden pre-activation or raw output to a kink."""
    x, _ = _as_batch(net, x)
    raw, _, pre = _forward_cache(net, x)
    d = min(np.abs(raw - net.out_low).min(), np.abs(raw - net.out_high).min())
    for z in pre:
        d = min(d, np.abs(z).min())
    return float(d)


def _unique_rows(x):
    points, index = np.unique(x, axis=0, return_inverse=True)
    return points, index.reshape(-1)


@dataclass
class SquaredLoss:
    """Weighted mean of (f(x_k) - y_k)^2; weights are normalized to sum to one.

    The network is evaluated once per distinct input row; gradients are
    scattered back with a fixed-order bincount.
    """

    x: np.ndarray
    y: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if len(self.y) == 0:
            raise SizeError("empty regression batch")
        if len(self.x) != len(self.y):
            raise DimensionError("inputs and targets differ in length")
        w = np.ones(len(self.y)) if self.weight is None else np.asarray(self.weight, dtype=float)
        self.weight = w / w.sum()
        self._points, self._index = _unique_rows(self.x)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "SquaredLoss":
        return SquaredLoss(self.x[idx], self.y[idx], self.weight[idx])

    def design(self) -> np.ndarray:
        return self._points

    def value_and_grad(self, out):
        resid = out[self._index] - self.y
        g = np.bincount(self._index, weights=2.0 * self.weight * resid, minlength=len(self._points))
        return float(self.weight @ resid ** 2), g


@dataclass
class ChoiceLoss:
    """Weighted mean softmax-choice NLL; ``candidates`` is (n, M, D)."""

    candidates: np.ndarray
    labels: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) == 0:
            raise SizeError("empty preference batch")
        if self.candidates.ndim != 3 or len(self.candidates) != len(self.labels):
            raise DimensionError("candidates must be (n, M, D) with one label per row")
        if self.labels.min() < 0 or self.labels.max() >= self.candidates.shape[1]:
            raise ValueError(f"labels must lie in 0..{self.candidates.shape[1] - 1}")
        w = np.ones(len(self.labels)) if self.weight is None else np.asarray(self.weight, dtype=float)
        self.weight = w / w.sum()
        n, M, D = self.candidates.shape
        self._points, self._index = _unique_rows(self.candidates.reshape(n * M, D))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ChoiceLoss":
        return ChoiceLoss(self.candidates[idx], self.labels[idx], self.weight[idx])

    def design(self) -> np.ndarray:
        return self._points

    def value_and_grad(self, out):
        n, M = len(self.labels), self.candidates.shape[1]
        r = out[self._index].reshape(n, M)
        rows = np.arange(n)
        top = r.max(axis=1)
        e = np.exp(r - top[:, None])
        total = e.sum(axis=1)
        value = float(self.weight @ (np.log(total) + top - r[rows, self.labels]))
        g = e / total[:, None]
        g[rows, self.labels] -= 1.0
        g *= self.weight[:, None]
        return value, np.bincount(self._index, weights=g.reshape(-1), minlength=len(self._points))


def loss_value(net, loss) -> float:
    out = forward(net, loss.design())
    return loss.value_and_grad(out)[0]


def loss_gradient(net: ReluNetwork, loss):
    """Exact gradient of the batch loss; returns ``(value, [dW1, db1, ...])``.

    ReLU kinks get subgradient 0; the output clip passes gradient on the
    closed interval and blocks it outside.
    """
    x, _ = _as_batch(net, loss.design())
    raw, acts, pre = _forward_cache(net, x)
    out = np.clip(raw, net.out_low, net.out_high)
    value, dout = loss.value_and_grad(out)
    delta = (dout * ((raw >= net.out_low) & (raw <= net.out_high)))[:, None]
    grads = []
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite values are reported by the caller
        for i in range(len(net.weights) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ acts[i])
            if i:
                delta = (delta @ net.weights[i]) * (pre[i - 1] > 0)
    grads.reverse()  # now [dW1, db1, dW2, db2, ...]
    return value, grads


def project(net: ReluNetwork) -> ReluNetwork:
    """Copy of ``net`` with every weight and bias clamped into [-tau, tau]."""
    out = net.copy()
    for p in out.parameters():
        np.clip(p, -out.tau, out.tau, out=p)
    return out


def train(net: ReluNetwork, loss, opt: OptimizerConfig, return_history=False):
    """Projected mini-batch descent; returns the lowest-loss iterate seen.

    Candidate iterates are projected parameter vectors scored on the full
    training loss. With full batches the score is the loss already computed
    for the gradient step, so every freshly projected iterate is a
    candidate; with mini-batches the candidates are the epoch ends.
    """
    if len(loss) == 0:
        raise SizeError("empty training set")
    rng = np.random.default_rng(opt.seed)
    cur = project(net)
    params = cur.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = len(loss)
    full = opt.batch_size is None or opt.batch_size >= n
    bs = n if full else opt.batch_size
    total = opt.epochs * math.ceil(n / bs)
    decay = opt.final_lr_fraction ** (1.0 / max(1, total - 1))

    best, best_val = None, np.inf
    history = []
    projected = True
    step = 0

    def consider(value):
        nonlocal best, best_val
        if not np.isfinite(value):
            raise TrainingDivergence(f"non-finite loss {value} after {step} steps", epoch=step)
        history.append(value)
        if value < best_val:
            best, best_val = cur.copy(), value

    for epoch in range(opt.epochs):
        order = None if full else rng.permutation(n)
        for start in range(0, n, bs):
            batch = loss if full else loss.subset(order[start:start + bs])
            value, grads = loss_gradient(cur, batch)
            if full and projected:
                consider(value)
            if not all(np.isfinite(g).all() for g in grads):
                raise TrainingDivergence(f"non-finite gradient at epoch {epoch}", epoch=epoch)
            lr = opt.learning_rate * decay ** step
            step += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                if opt.method == "gd":
                    p -= lr * g
                else:
                    mi *= b1
                    mi += (1 - b1) * g
                    vi *= b2
                    vi += (1 - b2) * g * g
                    p -= (lr / (1 - b1 ** step)) * mi / (np.sqrt(vi / (1 - b2 ** step)) + eps)
            projected = step % opt.project_every == 0
            if projected:
                for p in params:
                    np.clip(p, -cur.tau, cur.tau, out=p)
        if not full:
            for p in params:
                np.clip(p, -cur.tau, cur.tau, out=p)
            projected = True
            consider(loss_value(cur, loss))
    if full:
        for p in params:
            np.clip(p, -cur.tau, cur.tau, out=p)
        consider(loss_value(cur, loss))
    return (best, history) if return_history else best
