"""Tests for the brute-force return oracles."""

import numpy as np
import pytest

from effzero.env import Catcher, DeepSea
from effzero.oracles import deepsea_value_iteration, optimal_return, uniform_return


@pytest.mark.parametrize("seed", range(6))
def test_catcher_optimal_return_is_one(seed):
    """Test every 5x5 Catcher start can be caught."""
    env = Catcher(width=5, height=5, seed=seed)
    env.reset()

    assert optimal_return(env) == 1.0


def test_catcher_uniform_return_by_column():
    """Test uniform play catches more often when the fruit starts near the paddle."""
    env = Catcher()
    returns = []
    for column in range(5):
        env.reset()
        env.restore_state((0, column, 2, False))
        returns.append(uniform_return(env))

    assert returns[2] > returns[1] > returns[0]
    assert returns[1] == pytest.approx(returns[3])
    assert returns[0] == pytest.approx(returns[4])
    assert all(-1.0 < r < 1.0 for r in returns)


def test_oracles_restore_the_state():
    """Test the searches leave the environment where they found it."""
    env = Catcher(seed=2)
    env.reset()
    env.step(0)
    before = env.clone_state()

    optimal_return(env)
    uniform_return(env)

    assert env.clone_state() == before


def test_deepsea_optimal_return():
    """Test DeepSea(6) pays 1 minus six move costs for all-right play."""
    env = DeepSea(size=6)
    env.reset()

    assert optimal_return(env) == pytest.approx(1.0 - 0.01)
    assert deepsea_value_iteration(6, 1.0)[(0, 0)][1] == pytest.approx(optimal_return(env))


def test_deepsea_uniform_return():
    """Test uniform play finds the treasure with probability 2^-N and pays half the moves."""
    env = DeepSea(size=6)
    env.reset()

    assert uniform_return(env) == pytest.approx(0.5**6 - 3 * 0.01 / 6)


def test_discount_lowers_optimal_return():
    """Test discounting scales the delayed treasure."""
    env = DeepSea(size=4)
    env.reset()
    gamma = 0.9

    cost = 0.01 / 4
    expected = sum(-cost * gamma**i for i in range(4)) + gamma**3
    assert optimal_return(env, discount=gamma) == pytest.approx(expected)
    assert deepsea_value_iteration(4, gamma)[(0, 0)][1] == pytest.approx(expected)
    assert not np.isnan(uniform_return(env, discount=gamma))
