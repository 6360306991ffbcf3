"""Pytest configuration and shared fixtures for effzero tests.

Everything here is sized so that a test runs in well under a second on a
laptop CPU; end-to-end learning checks are marked ``slow``.
"""

from typing import Any, Callable, List, Optional, Tuple

import numpy as np
import pytest

from effzero.config import RunConfig
from effzero.env import Catcher, DeepSea, Environment, FrameHistory
from effzero.reanalyze import TrainBatch
from effzero.replay import EpisodeRecorder, GameSegment, ReplayBuffer

TINY: dict = {
    "env_name": "catcher",
    "representation": "mlp",
    "frames_stacked": 2,
    "latent_dim": 8,
    "head_hidden": 8,
    "lstm_hidden": 8,
    "projection_hidden": 8,
    "projection_dim": 4,
    "predictor_hidden": 4,
    "conv_channels": 4,
    "support_size": 5,
    "support_bins": 11,
    "num_simulations": 4,
    "unroll_steps": 2,
    "td_steps": 2,
    "segment_length": 6,
    "batch_size": 4,
    "training_steps": 12,
    "env_steps_budget": 80,
    "min_replay_size": 12,
    "checkpoint_interval": 6,
    "evaluation_episodes": 2,
    "selfplay_model_interval": 3,
    "target_model_interval": 4,
    "lr_initial": 0.01,
    "lr_decayed": 0.001,
    "lr_decay_steps": 8,
    "augment_max_shift": 1,
    "log_level": "WARNING",
}


@pytest.fixture
def config_factory() -> Callable[..., RunConfig]:
    """Build a tiny RunConfig with overrides."""

    def make(**overrides: Any) -> RunConfig:
        data = dict(TINY)
        data.update(overrides)
        return RunConfig(**data)

    return make


@pytest.fixture
def tiny_config(config_factory: Callable[..., RunConfig]) -> RunConfig:
    return config_factory()


@pytest.fixture
def f64_config(config_factory: Callable[..., RunConfig]) -> RunConfig:
    return config_factory(precision="float64")


def play_segments(
    env: Environment,
    episodes: int,
    segment_length: int,
    pad: int,
    frames: int = 2,
    seed: int = 0,
    collection_step: int = 0,
) -> List[GameSegment]:
    """Uniformly random play recorded into segments (with env states)."""
    rng = np.random.default_rng(seed)
    recorder = EpisodeRecorder(segment_length, pad, keep_env_states=True)
    history = FrameHistory(frames)
    segments: List[GameSegment] = []
    uniform = np.full(env.action_space, 1.0 / env.action_space)
    for _ in range(episodes):
        recorder.start(history.reset(env.reset()), env.clone_state())
        done = False
        while not done:
            action = int(rng.integers(env.action_space))
            result = env.step(action)
            done = result.done
            segments += recorder.record(
                action,
                result.reward,
                uniform,
                0.0,
                collection_step,
                history.push(result.observation),
                env.clone_state(),
            )
        segments += recorder.finish()
    return segments


@pytest.fixture
def catcher_segments() -> List[GameSegment]:
    return play_segments(Catcher(seed=3), episodes=8, segment_length=6, pad=4)


@pytest.fixture
def filled_replay(catcher_segments: List[GameSegment]) -> ReplayBuffer:
    buffer = ReplayBuffer(capacity=200, alpha=0.6, min_size=1)
    for segment in catcher_segments:
        buffer.append(segment)
    return buffer


@pytest.fixture
def deepsea() -> DeepSea:
    return DeepSea(size=4)


def random_batch(
    config: RunConfig,
    obs_shape: Tuple[int, int, int],
    action_space: int,
    rng: np.random.Generator,
    batch: int = 3,
    rewards: Optional[np.ndarray] = None,
) -> TrainBatch:
    """A well-formed TrainBatch of random observations and targets."""
    L = config.unroll_steps
    dtype = np.dtype(config.precision)
    if rewards is None:
        rewards = rng.normal(0.0, 1.0, size=(batch, L))
    prefixes = np.cumsum(rewards, axis=1)
    return TrainBatch(
        observations=rng.random((batch,) + obs_shape).astype(dtype),
        next_observations=rng.random((batch, L) + obs_shape).astype(dtype),
        actions=rng.integers(action_space, size=(batch, L)),
        target_value_prefixes=prefixes,
        target_rewards=rewards,
        target_values=rng.normal(0.0, 1.0, size=(batch, L + 1)),
        target_policies=rng.dirichlet(np.ones(action_space), size=(batch, L + 1)),
        consistency_mask=np.ones((batch, L)),
        weights=np.ones(batch),
        indices=np.arange(batch),
        staleness=np.zeros(batch, dtype=np.int64),
    )


@pytest.fixture
def batch_factory() -> Callable[..., TrainBatch]:
    return random_batch
