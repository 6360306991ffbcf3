"""Small deterministic image-observation environments and frame stacking."""

from abc import ABC, abstractmethod
from collections import deque
from typing import Any, Deque, Optional, Sequence, Tuple

import numpy as np

from effzero.decorators import environment, make_env
from effzero.types import StepResult


class EpisodeFinishedError(RuntimeError):
    """Raised when ``step`` is called after the episode has ended."""


class Environment(ABC):
    """Discrete-action environment with (channels, height, width) observations in [0, 1].

    Subclasses must be deterministic given the seed and the action sequence.
    """

    action_space: int
    observation_shape: Tuple[int, int, int]
    default_reward_clipping: bool = False

    @property
    def name(self) -> str:
        return getattr(self, "_env_name", type(self).__name__.lower())

    @abstractmethod
    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        """Start a new episode and return its first observation.

        With ``seed`` the episode stream restarts from that seed, so two
        ``reset(seed=s)`` calls give the same episode. A bare ``reset()``
        moves on to the next episode of the stream seeded at construction.
        """

    @abstractmethod
    def step(self, action: int) -> StepResult:
        """Advance one step."""

    @abstractmethod
    def clone_state(self) -> Any:
        """Return a value that ``restore_state`` turns back into this exact state."""

    @abstractmethod
    def restore_state(self, state: Any) -> None:
        """Restore a state produced by ``clone_state``."""

    def close(self) -> None:
        """Release external resources (no-op for built-ins)."""

    def _check_action(self, action: int) -> int:
        action = int(action)
        if not 0 <= action < self.action_space:
            raise ValueError(
                f"Action {action} out of range for {self.name} "
                f"(action_space={self.action_space})"
            )
        return action


@environment("catcher")
class Catcher(Environment):
    """One fruit falls from the top row; catch it with the paddle on the bottom row.

    Actions: 0 left, 1 stay, 2 right. Each step moves the paddle, then the fruit
    falls one row. When the fruit reaches the paddle row the episode ends with
    +1 if the paddle is under it and -1 otherwise. Planes: fruit, paddle.
    """

    action_space = 3

    def __init__(self, width: int = 5, height: int = 5, seed: int = 0):
        if width < 1 or height < 2:
            raise ValueError(f"Catcher needs width >= 1 and height >= 2, got {width}x{height}")
        self.width = width
        self.height = height
        self.observation_shape = (2, height, width)
        self._rng = np.random.default_rng(seed)
        self._fruit_row = 0
        self._fruit_col = 0
        self._paddle_col = width // 2
        self._done = True

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._fruit_row = 0
        self._fruit_col = int(self._rng.integers(self.width))
        self._paddle_col = self.width // 2
        self._done = False
        return self.render()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeFinishedError("Catcher episode is over; call reset()")
        action = self._check_action(action)
        self._paddle_col = min(max(self._paddle_col + action - 1, 0), self.width - 1)
        self._fruit_row += 1
        reward = 0.0
        if self._fruit_row == self.height - 1:
            self._done = True
            reward = 1.0 if self._paddle_col == self._fruit_col else -1.0
        return StepResult(observation=self.render(), reward=reward, done=self._done)

    def render(self) -> np.ndarray:
        pixels = np.zeros(self.observation_shape, dtype=np.float32)
        pixels[0, self._fruit_row, self._fruit_col] = 1.0
        pixels[1, self.height - 1, self._paddle_col] = 1.0
        return pixels

    def clone_state(self) -> Tuple[int, int, int, bool]:
        return (self._fruit_row, self._fruit_col, self._paddle_col, self._done)

    def restore_state(self, state: Any) -> None:
        fruit_row, fruit_col, paddle_col, done = state
        self._fruit_row = int(fruit_row)
        self._fruit_col = int(fruit_col)
        self._paddle_col = int(paddle_col)
        self._done = bool(done)


@environment("deepsea")
class DeepSea(Environment):
    """N x N hard-exploration grid.

    The agent starts top-left and descends one row per step. Action 1 moves
    right at a cost of 0.01/N, action 0 moves left for free (both clamped to
    the grid). The N-th step ends the episode; taking "right" there while in
    the rightmost column pays +1, so only N consecutive rights are rewarded.
    """

    action_space = 2

    def __init__(self, size: int = 6, seed: int = 0):
        if size < 1:
            raise ValueError(f"DeepSea size must be >= 1, got {size}")
        self.size = size
        self.observation_shape = (1, size, size)
        self.move_cost = 0.01 / size
        self._row = 0
        self._col = 0
        self._done = True

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        self._row = 0
        self._col = 0
        self._done = False
        return self.render()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeFinishedError("DeepSea episode is over; call reset()")
        action = self._check_action(action)
        reward = 0.0
        if action == 1:
            reward -= self.move_cost
            if self._row == self.size - 1 and self._col == self.size - 1:
                reward += 1.0
            self._col = min(self._col + 1, self.size - 1)
        else:
            self._col = max(self._col - 1, 0)
        self._row += 1
        if self._row == self.size:
            self._done = True
        return StepResult(observation=self.render(), reward=reward, done=self._done)

    def render(self) -> np.ndarray:
        pixels = np.zeros(self.observation_shape, dtype=np.float32)
        if not self._done:
            pixels[0, self._row, self._col] = 1.0
        return pixels

    def clone_state(self) -> Tuple[int, int, bool]:
        return (self._row, self._col, self._done)

    def restore_state(self, state: Any) -> None:
        row, col, done = state
        self._row = int(row)
        self._col = int(col)
        self._done = bool(done)


def stack_frames(history: Sequence[np.ndarray], frames: int) -> np.ndarray:
    """Concatenate the last ``frames`` observations along channels, oldest first.

    A short history is padded by repeating its earliest frame.
    """
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    if not history:
        raise ValueError("stack_frames needs at least one observation")
    recent = list(history)[-frames:]
    padding = [recent[0]] * (frames - len(recent))
    return np.concatenate(padding + recent, axis=0)


class FrameHistory:
    """Rolling window of the last F observations of one episode."""

    def __init__(self, frames: int):
        self.frames = frames
        self._frames: Deque[np.ndarray] = deque(maxlen=frames)

    def reset(self, observation: np.ndarray) -> np.ndarray:
        self._frames.clear()
        self._frames.append(observation)
        return self.stacked()

    def push(self, observation: np.ndarray) -> np.ndarray:
        self._frames.append(observation)
        return self.stacked()

    def stacked(self) -> np.ndarray:
        return stack_frames(self._frames, self.frames)

    def copy(self) -> "FrameHistory":
        clone = FrameHistory(self.frames)
        clone._frames = deque(self._frames, maxlen=self.frames)
        return clone


def clip_reward(reward: float) -> float:
    """Sign-clip a reward to {-1, 0, 1}."""
    return float(np.sign(reward))


def build_env(name: str, seed: int = 0, options: Optional[dict] = None) -> Environment:
    """Instantiate a registered environment with its seed and options."""
    return make_env(name, seed=seed, **(options or {}))
