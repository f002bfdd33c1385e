"""Off-policy evaluation from preference feedback: reward MLE on softmax
choices, fitted Q-evaluation with constrained ReLU networks, and the exact
oracles and diagnostics used to check them."""

from .errors import (ConfigError, DimensionError, NonFiniteError, PrefqeError, SizeError, StageError,
                     SupportError, TrainingDivergence)
from .mdp import (Policy, TabularMdp, exact_policy_value, exact_q_function, monte_carlo_value, occupancies,
                  random_tabular_mdp, rollout, visitation_distribution)
from .envs import (EnvConfig, EmbeddedMdp, generate_preference_dataset, generate_transition_dataset,
                   make_embedded_mdp)
from .relu_net import NetConfig, OptimizerConfig, ReluNetwork, paper_scaling, train
from .reward_mle import LearnedReward, fit_reward
from .fqe import EvalReport, PipelineConfig, fitted_q_evaluation, run_pipeline
from .divergence import kappa_profile, pearson_chi_square, restricted_chi_square, verify_shift_bound

__version__ = "0.1.0"
