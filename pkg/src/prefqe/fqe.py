"""Backward fitted Q-evaluation on a learned reward, and the end-to-end run."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeError, StageError
from .mdp import Policy, dumps_17g, exact_policy_value, occupancies
from .relu_net import NetConfig, OptimizerConfig, ReluNetwork, SquaredLoss, train, loss_value
from .reward_mle import REWARD_NET, REWARD_OPT, fit_reward, reward_mse_exact

Q_OPT = OptimizerConfig(learning_rate=3e-3, epochs=1500, final_lr_fraction=0.05)


def q_net_config(horizon, hidden_layers=2, width=32, tau=10.0) -> NetConfig:
    """Q-networks are clipped to [-H, H]."""
    return NetConfig(hidden_layers=hidden_layers, width=width, tau=tau,
                     out_low=-float(horizon), out_high=float(horizon))


class LinearQ:
    """Linear function of the features; with one-hot features, a Q table."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=float)

    def __call__(self, x):
        return np.atleast_2d(np.asarray(x, dtype=float)) @ self.weights


def regression_targets(reward_values, next_q=None, next_pi=None) -> np.ndarray:
    """r_hat(s, a) + sum_a' pi_{h+1}(a' | s') Q_{h+1}(s', a') per sample.

    ``next_q`` and ``next_pi`` are (n, A); pass ``next_q=None`` at the
    last step, where the continuation is zero.
    """
    r = np.asarray(reward_values, dtype=float)
    if next_q is None:
        return r.copy()
    return r + (np.asarray(next_pi, dtype=float) * np.asarray(next_q, dtype=float)).sum(axis=1)


def regression_target(qnext, rhat, x, next_x, next_pi) -> np.ndarray:
    """Callable form: ``qnext`` maps (m, F) rows to values (None at h = H),
    ``rhat`` maps (n, F') rows to rewards, ``next_x`` is (n, A, F)."""
    rv = rhat(x)
    if qnext is None:
        return regression_targets(rv)
    next_x = np.asarray(next_x, dtype=float)
    n, A, F = next_x.shape
    return regression_targets(rv, np.asarray(qnext(next_x.reshape(n * A, F))).reshape(n, A), next_pi)


def fit_q_step(inputs, targets, net_config: NetConfig | None = None, opt_config: OptimizerConfig = Q_OPT,
               seed=0, mode="net"):
    """Least-squares fit of one step's Q-function.

    ``mode="net"`` trains a clipped ReLU network. ``mode="tabular"``
    solves the least-squares problem in closed form (minimum-norm
    solution), which with one-hot inputs gives the per-cell mean target and
    0 on cells without data. Returns ``(model, training_mse)``.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float)
    if len(y) == 0:
        raise SizeError("empty transition slice")
    if mode == "tabular":
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        model = LinearQ(w)
        return model, float(np.mean((model(x) - y) ** 2))
    if mode != "net":
        raise ValueError(f"unknown fitting mode {mode!r}")
    if net_config is None:
        net_config = q_net_config(max(1.0, float(np.abs(y).max())))
    loss = SquaredLoss(x, y)
    net = train(ReluNetwork.initialize(x.shape[1], net_config, seed), loss, opt_config)
    return net, loss_value(net, loss)


def estimate_value(q1, xi, pi1, features=None) -> float:
    """sum_s xi(s) sum_a pi_1(a | s) Q_1(s, a).

    ``q1`` is an (S, A) table, or a callable evaluated on the (S, A, F)
    ``features`` table.
    """
    if callable(q1):
        S, A, F = features.shape
        q1 = np.asarray(q1(features.reshape(S * A, F))).reshape(S, A)
    return float(np.asarray(xi) @ (np.asarray(pi1) * np.asarray(q1)).sum(axis=1))


@dataclass
class FittedQ:
    """Per-step fitted models and their values on the finite support."""

    models: list
    tables: np.ndarray  # (H, S, A); step H+1 is implicitly zero


@dataclass
class EvalReport:
    v_hat: float
    v_true: float | None
    train_losses: list
    bellman_residuals: list  # population residuals under the behavior occupancy
    reward_mse: list
    seed: int = 0
    K: int = 0
    K_HF: int = 0
    runtime_s: float = 0.0
    nonzeros: list = field(default_factory=list)

    @property
    def abs_err(self) -> float:
        return abs(self.v_hat - self.v_true) if self.v_true is not None else float("nan")

    def to_dict(self, include_runtime=True) -> dict:
        d = {"v_hat": self.v_hat, "v_true": self.v_true, "abs_err": self.abs_err,
             "train_losses": list(map(float, self.train_losses)),
             "bellman_residuals": list(map(float, self.bellman_residuals)),
             "reward_mse": list(map(float, self.reward_mse)),
             "seed": self.seed, "K": self.K, "K_HF": self.K_HF, "nonzeros": list(self.nonzeros)}
        if include_runtime:
            d["runtime_s"] = self.runtime_s
        return d

    def to_json(self, include_runtime=True) -> str:
        return dumps_17g(self.to_dict(include_runtime))

    def summary_row(self, D, d, H) -> dict:
        return {"seed": self.seed, "K": self.K, "K_HF": self.K_HF, "D": D, "d": d, "H": H,
                "v_hat": self.v_hat, "v_true": self.v_true, "abs_err": self.abs_err,
                "reward_mse_mean": float(np.mean(self.reward_mse)) if len(self.reward_mse) else float("nan"),
                "runtime_s": self.runtime_s}


@dataclass(frozen=True)
class PipelineConfig:
    q_mode: str = "net"  # "net" or "tabular" (one-hot inputs, closed-form least squares)
    reward_source: str = "learned"  # "learned" or "true"
    reward_net: NetConfig = REWARD_NET
    reward_opt: OptimizerConfig = REWARD_OPT
    q_net: NetConfig | None = None  # default: q_net_config(H)
    q_opt: OptimizerConfig = Q_OPT
    seed: int = 0


def fitted_q_evaluation(env, transitions, target: Policy, reward_table, config: PipelineConfig):
    """Backward loop h = H..1 on fixed rewards; returns (FittedQ, train losses)."""
    H, S, A = env.horizon, env.num_states, env.num_actions
    features = env.one_hot() if config.q_mode == "tabular" else env.embedding
    F = features.shape[-1]
    net_cfg = config.q_net or q_net_config(H)
    tables = np.zeros((H, S, A))
    models, losses = [None] * H, [0.0] * H
    for h in range(H, 0, -1):
        try:
            s, a, sn = transitions.s[h - 1], transitions.a[h - 1], transitions.s_next[h - 1]
            if h == H:
                y = regression_targets(reward_table[h - 1][s, a])
            else:
                y = regression_targets(reward_table[h - 1][s, a], tables[h][sn], target.step(h + 1)[sn])
            seed = int(np.random.SeedSequence([config.seed, 4, h]).generate_state(1)[0])
            model, losses[h - 1] = fit_q_step(features[s, a], y, net_cfg, config.q_opt, seed, config.q_mode)
            tables[h - 1] = np.asarray(model(features.reshape(S * A, F))).reshape(S, A)
            models[h - 1] = model
        except StageError:
            raise
        except Exception as exc:
            raise StageError("fit_q_step", h, exc) from exc
    return FittedQ(models, tables), losses


def bellman_residuals(env, q_tables, target: Policy, reward_table, weights) -> np.ndarray:
    """Per-step E_w[(Q_h - r_h - P^pi Q_{h+1})^2] under per-step weights (H, S, A)."""
    H = env.horizon
    out = np.zeros(H)
    for h in range(H):
        backup = reward_table[h].copy()
        if h + 1 < H:
            backup += env.mdp.transitions[h] @ (target.probs[h + 1] * q_tables[h + 1]).sum(axis=1)
        out[h] = float(((q_tables[h] - backup) ** 2 * weights[h]).sum())
    return out


def error_decomposition(env, q_tables, target: Policy) -> np.ndarray:
    """Per-step E_{q_h^pi} |Q_h - T_h Q_{h+1}| with the true reward.

    Their sum bounds |v_hat - v|, since v_hat - v telescopes into the
    occupancy-weighted signed residuals.
    """
    occ = occupancies(env.mdp, target)
    H = env.horizon
    out = np.zeros(H)
    for h in range(H):
        backup = env.rewards[h].copy()
        if h + 1 < H:
            backup += env.mdp.transitions[h] @ (target.probs[h + 1] * q_tables[h + 1]).sum(axis=1)
        out[h] = float((np.abs(q_tables[h] - backup) * occ[h]).sum())
    return out


def run_pipeline(env, transitions, prefs, target: Policy, config: PipelineConfig = PipelineConfig(),
                 behavior: Policy | None = None, eta=None, learned_reward=None) -> EvalReport:
    """Reward MLE on every step, then backward FQE, then the value integral.

    ``behavior`` and ``eta`` are used only for diagnostics (Bellman
    residuals, reward MSE); the estimate itself sees only the datasets.
    A precomputed ``learned_reward`` skips the MLE stage.
    """
    start = time.perf_counter()
    H = env.horizon
    if transitions.horizon != H or (prefs is not None and prefs.horizon != H):
        raise StageError("input", min(transitions.horizon, H), "datasets must cover every step")
    nonzeros = []
    if config.reward_source == "true":
        reward_table = env.rewards
        learned = None
    else:
        if learned_reward is None:
            opt = OptimizerConfig(**{**config.reward_opt.__dict__, "seed": config.seed})
            learned_reward = fit_reward(prefs, config.reward_net, opt)
        learned = learned_reward
        reward_table = learned.table(env.embedding)
        nonzeros = learned.nonzeros()

    fitted, losses = fitted_q_evaluation(env, transitions, target, reward_table, config)
    v_hat = estimate_value(fitted.tables[0], env.mdp.initial, target.step(1))
    v_true = exact_policy_value(env.mdp, target)

    residuals = []
    if behavior is not None:
        residuals = bellman_residuals(env, fitted.tables, target, reward_table,
                                      occupancies(env.mdp, behavior)).tolist()
    mse = []
    if learned is not None and eta is not None:
        mse = reward_mse_exact(learned, env.rewards, eta, env.embedding).tolist()
    if config.q_mode == "net":
        nonzeros = nonzeros + [m.nonzeros() for m in fitted.models]
    return EvalReport(v_hat=v_hat, v_true=v_true, train_losses=losses, bellman_residuals=residuals,
                      reward_mse=mse, seed=config.seed, K=transitions.size,
                      K_HF=0 if prefs is None else prefs.size,
                      runtime_s=time.perf_counter() - start, nonzeros=nonzeros)
