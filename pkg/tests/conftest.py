import numpy as np
import pytest

from prefqe.mdp import Policy, random_tabular_mdp


@pytest.fixture
def small_mdp():
    return random_tabular_mdp(3, 4, 2, seed=7)


@pytest.fixture
def uniform_policy(small_mdp):
    return Policy.uniform(small_mdp.horizon, small_mdp.num_states, small_mdp.num_actions)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
