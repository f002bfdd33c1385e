"""Per-step maximum-likelihood reward fitting with anchor normalization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import SizeError, StageError
from .mdp import dumps_17g
from .relu_net import ChoiceLoss, NetConfig, OptimizerConfig, ReluNetwork, train, loss_value

REWARD_NET = NetConfig(hidden_layers=2, width=32, tau=10.0, out_low=0.0, out_high=1.0)
REWARD_OPT = OptimizerConfig(learning_rate=3e-3, epochs=1500, final_lr_fraction=0.05)


def aggregate_rows(*arrays):
    """Collapse identical rows across aligned arrays.

    Returns the unique rows (split back into the original arrays) and their
    multiplicities. A weighted loss over the unique rows equals the plain
    loss over all rows, so full-batch training is unchanged.
    """
    n = len(arrays[0])
    flat = [np.asarray(a, dtype=float).reshape(n, -1) for a in arrays]
    widths = [f.shape[1] for f in flat]
    uniq, counts = np.unique(np.hstack(flat), axis=0, return_counts=True)
    out, start = [], 0
    for a, w in zip(arrays, widths):
        out.append(uniq[:, start:start + w].reshape((len(uniq),) + np.shape(a)[1:]))
        start += w
    return out, counts.astype(float)


@dataclass
class LearnedReward:
    """Per-step networks and anchor offsets; r_hat_h(x) = net_h(x) - offset_h."""

    nets: list
    offsets: np.ndarray
    anchor_inputs: np.ndarray
    train_losses: np.ndarray = None

    @property
    def horizon(self):
        return len(self.nets)

    def __call__(self, h, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.nets[h - 1](x) - self.offsets[h - 1]
        # the anchor value is the cached evaluation itself, so it is exactly 0
        out[np.all(x == self.anchor_inputs[h - 1], axis=1)] = 0.0
        return out

    def table(self, feature_table) -> np.ndarray:
        """Evaluate every step on a (S, A, F) feature table; returns (H, S, A)."""
        S, A, F = feature_table.shape
        flat = feature_table.reshape(S * A, F)
        return np.stack([self(h, flat).reshape(S, A) for h in range(1, self.horizon + 1)])

    def nonzeros(self) -> list:
        return [net.nonzeros() for net in self.nets]

    def equals(self, other) -> bool:
        return np.array_equal(self.offsets, other.offsets) and \
            all(a.equals(b) for a, b in zip(self.nets, other.nets))

    def to_json(self) -> str:
        return dumps_17g({"nets": [n.to_dict() for n in self.nets], "offsets": self.offsets.tolist(),
                          "anchor_inputs": self.anchor_inputs.tolist()})

    @classmethod
    def from_json(cls, text) -> "LearnedReward":
        d = json.loads(text)
        return cls([ReluNetwork.from_dict(n) for n in d["nets"]], np.array(d["offsets"]),
                   np.array(d["anchor_inputs"]))


def fit_step_reward(candidates, labels, net_config=REWARD_NET, opt_config=REWARD_OPT, seed=0):
    """Fit one network to a (n, M, D) slice of comparisons by maximum likelihood."""
    candidates = np.asarray(candidates, dtype=float)
    if len(candidates) == 0:
        raise SizeError("empty preference slice")
    (cands, labs), counts = aggregate_rows(candidates, np.asarray(labels))
    loss = ChoiceLoss(cands, labs.astype(np.int64).reshape(-1), counts)
    net = ReluNetwork.initialize(candidates.shape[-1], net_config, seed)
    net = train(net, loss, opt_config)
    return net, loss_value(net, loss)


def fit_reward(prefs, net_config=REWARD_NET, opt_config=REWARD_OPT, feature_table=None) -> LearnedReward:
    """Fit r^l_h for every step independently, then subtract r^l_h(anchor).

    ``feature_table`` (S, A, F) swaps the network inputs, e.g. for one-hot
    features; by default the dataset's ambient embedding is used.
    """
    table = prefs.embedding if feature_table is None else np.asarray(feature_table, dtype=float)
    nets, offsets, anchors, losses = [], [], [], []
    for h in range(1, prefs.horizon + 1):
        seed = np.random.SeedSequence([opt_config.seed, 3, h]).generate_state(1)[0]
        try:
            s, a = prefs.candidate_indices(h)
            net, value = fit_step_reward(table[s, a], prefs.labels[h - 1], net_config, opt_config,
                                         seed=int(seed))
        except Exception as exc:
            raise StageError("fit_reward", h, exc) from exc
        anchor_x = table[tuple(prefs.anchor[h - 1])]
        nets.append(net)
        offsets.append(net(anchor_x[None, :])[0])
        anchors.append(anchor_x)
        losses.append(value)
    return LearnedReward(nets, np.array(offsets), np.array(anchors), np.array(losses))


def reward_mse(learned, truth, eta_samples, feature_table):
    """Sample mean of (r_hat - r)^2 per step with its standard error.

    ``truth`` is the (H, S, A) reward table and ``eta_samples[h - 1]`` an
    (n, 2) array of (s, a) pairs drawn from eta_h.
    """
    means, ses = [], []
    for h in range(1, learned.horizon + 1):
        pairs = np.asarray(eta_samples[h - 1], dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            raise SizeError(f"no eta samples at step {h}")
        err = (learned(h, feature_table[pairs[:, 0], pairs[:, 1]]) - truth[h - 1][pairs[:, 0], pairs[:, 1]]) ** 2
        means.append(err.mean())
        ses.append(err.std(ddof=1) / np.sqrt(len(err)) if len(err) > 1 else np.nan)
    return np.array(means), np.array(ses)


def reward_mse_exact(learned, truth, eta, feature_table) -> np.ndarray:
    """Per-step integral of (r_hat - r)^2 against the finite distribution eta_h."""
    est = learned.table(feature_table)
    return ((est - truth) ** 2 * eta).reshape(learned.horizon, -1).sum(axis=1)


METRIC_FIELDS = ["h", "seed", "K_HF", "reward_mse", "stderr", "nonzeros"]


def reward_metric_rows(learned, truth, eta_samples, feature_table, seed, K_HF) -> list:
    """One metrics row per step, keyed like the ``METRIC_FIELDS`` CSV."""
    means, ses = reward_mse(learned, truth, eta_samples, feature_table)
    return [{"h": h + 1, "seed": seed, "K_HF": K_HF, "reward_mse": float(means[h]), "stderr": float(ses[h]),
             "nonzeros": nz} for h, nz in enumerate(learned.nonzeros())]


def write_reward_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in row.items()})
