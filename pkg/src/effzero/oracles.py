"""Brute-force references for the built-in environments.

These are the ground truths tests and diagnostics compare against:
exhaustive optimal and uniform-play returns via ``clone_state`` /
``restore_state``, DeepSea value iteration, and an exact DeepSea model
that can be plugged into the search in place of the learned one.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from effzero.env import DeepSea, Environment
from effzero.model import InferenceOutput, ValuePrefixState


def optimal_return(env: Environment, discount: float = 1.0, max_depth: int = 64) -> float:
    """Best achievable discounted return from the env's current state."""
    state = env.clone_state()
    best = float("-inf")
    for action in range(env.action_space):
        env.restore_state(state)
        result = env.step(action)
        value = result.reward
        if not result.done and max_depth > 1:
            value += discount * optimal_return(env, discount, max_depth - 1)
        best = max(best, value)
    env.restore_state(state)
    return best


def uniform_return(env: Environment, discount: float = 1.0, max_depth: int = 64) -> float:
    """Expected discounted return of uniformly random play from the current state."""
    state = env.clone_state()
    total = 0.0
    for action in range(env.action_space):
        env.restore_state(state)
        result = env.step(action)
        value = result.reward
        if not result.done and max_depth > 1:
            value += discount * uniform_return(env, discount, max_depth - 1)
        total += value
    env.restore_state(state)
    return total / env.action_space


def deepsea_value_iteration(size: int, discount: float) -> Dict[Tuple[int, int], Tuple[int, float]]:
    """Optimal (action, value) for every cell of DeepSea(size); lowest action wins ties."""
    cost = 0.01 / size
    values = np.zeros((size + 1, size))
    policy: Dict[Tuple[int, int], Tuple[int, float]] = {}
    for row in range(size - 1, -1, -1):
        for col in range(size):
            left_col = max(col - 1, 0)
            right_col = min(col + 1, size - 1)
            left = discount * values[row + 1, left_col]
            right = -cost + discount * values[row + 1, right_col]
            if row == size - 1 and col == size - 1:
                right += 1.0
            best_action = 0 if left >= right else 1
            values[row, col] = max(left, right)
            policy[(row, col)] = (best_action, float(values[row, col]))
    return policy


def deepsea_reachable_states(size: int) -> list:
    """Cells visited by some action sequence from the top-left start."""
    return [(row, col) for row in range(size) for col in range(row + 1)]


class ExactDeepSeaModel:
    """The true DeepSea dynamics in the search-model interface.

    Latents are ``(row, col, done)`` triples decoded from the newest frame of
    a stacked observation. Rewards are accumulated into value prefixes that
    reset every ``reset_horizon`` steps and priors are uniform. Values are 0,
    or the optimal values from ``deepsea_value_iteration`` when a
    ``discount`` is given. Finished episodes are absorbing with zero reward.
    """

    def __init__(self, size: int, reset_horizon: int = 5, discount: Optional[float] = None):
        self.env = DeepSea(size=size)
        self.size = size
        self.action_space = DeepSea.action_space
        self.reset_horizon = reset_horizon
        self.values: Optional[Dict[Tuple[int, int], float]] = None
        if discount is not None:
            table = deepsea_value_iteration(size, discount)
            self.values = {cell: value for cell, (_, value) in table.items()}

    def value(self, latents: np.ndarray) -> np.ndarray:
        if self.values is None:
            return np.zeros(latents.shape[0])
        return np.array(
            [0.0 if done else self.values[(int(row), int(col))] for row, col, done in latents]
        )

    def encode(self, observations: np.ndarray) -> np.ndarray:
        frames = np.asarray(observations)[:, -1]
        latents = np.zeros((frames.shape[0], 3))
        for i, frame in enumerate(frames):
            hits = np.argwhere(frame > 0.5)
            if hits.size:
                latents[i, :2] = hits[0]
            else:
                latents[i] = (self.size, 0, 1)
        return latents

    def initial_inference(self, observations: np.ndarray) -> InferenceOutput:
        latents = self.encode(observations)
        batch = latents.shape[0]
        return InferenceOutput(
            latent=latents,
            value=self.value(latents),
            value_prefix=np.zeros(batch),
            policy_logits=np.zeros((batch, self.action_space)),
            vp_state=ValuePrefixState.zeros(batch, 1, np.float64),
        )

    def recurrent_inference(
        self, latent: np.ndarray, actions: np.ndarray, vp_state: ValuePrefixState
    ) -> InferenceOutput:
        batch = latent.shape[0]
        next_latent = np.array(latent, dtype=np.float64)
        rewards = np.zeros(batch)
        for i in range(batch):
            row, col, done = (int(v) for v in latent[i])
            if done:
                continue
            self.env.restore_state((row, col, False))
            result = self.env.step(int(actions[i]))
            new_row, new_col, new_done = self.env.clone_state()
            next_latent[i] = (new_row, new_col, int(new_done))
            rewards[i] = result.reward
        prefix = vp_state.hidden[:, 0] + rewards
        steps = vp_state.steps + 1
        wrap = steps >= self.reset_horizon
        hidden = np.where(wrap, 0.0, prefix).reshape(-1, 1)
        return InferenceOutput(
            latent=next_latent,
            value=self.value(next_latent),
            value_prefix=prefix,
            policy_logits=np.zeros((batch, self.action_space)),
            vp_state=ValuePrefixState(hidden, hidden.copy(), np.where(wrap, 0, steps)),
        )
