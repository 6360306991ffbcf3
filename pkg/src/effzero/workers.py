"""Pipeline workers: self-play actors, target-preparation workers and the learner."""

import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from effzero.config import RunConfig
from effzero.env import Environment, FrameHistory, clip_reward
from effzero.mcts import search
from effzero.model import ModelSet
from effzero.protocol import ProtocolError, open_env
from effzero.reanalyze import BatchContext, TrainBatch, compute_targets, prepare_context
from effzero.replay import EpisodeRecorder, GameSegment, ReplayBuffer
from effzero.trainer import train_step
from effzero.types import NoiseMode, WorkerHealth, WorkerState


class BaseWorker(ABC):
    """
    Base class for every pipeline worker.

    Provides the lifecycle (startup, shutdown, health) shared by actors,
    target workers and the learner; subclasses add the work itself.

    Attributes:
        worker_id: Unique identifier, also the logger suffix
        role: Worker kind ("actor", "context", "batch", "learner")
        state: Current lifecycle state
        config: Run configuration
    """

    role = "worker"

    def __init__(self, worker_id: str, config: RunConfig):
        self.worker_id = worker_id
        self.config = config
        self._state = WorkerState.INITIALIZING
        self._error_count = 0
        self._last_heartbeat = datetime.now()
        self._logger = self._setup_logging()

    def _setup_logging(self) -> logging.Logger:
        """Setup logging for worker."""
        logger = logging.getLogger(f"effzero.{self.worker_id}")
        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(
                f"%(asctime)s - {self.worker_id} - %(levelname)s - %(message)s"
            )
            handler.setFormatter(formatter)
            logger.addHandler(handler)
            logger.propagate = False
            logger.setLevel(self.config.get_log_level_int())
        return logger

    @property
    def state(self) -> WorkerState:
        return self._state

    @property
    def error_count(self) -> int:
        return self._error_count

    async def startup(self) -> None:
        """
        Initialize the worker.

        Calls the ``on_startup`` hook and transitions to READY.
        """
        self._logger.info(f"Starting {self.role} {self.worker_id}")
        self._state = WorkerState.INITIALIZING
        await self.on_startup()
        self._state = WorkerState.READY
        self._last_heartbeat = datetime.now()
        self._logger.info(f"{self.role.capitalize()} {self.worker_id} ready")

    @abstractmethod
    async def on_startup(self) -> None:
        """Subclass hook for custom startup logic."""

    async def shutdown(self) -> None:
        """
        Gracefully shutdown the worker.

        Transitions to STOPPING, calls ``on_shutdown``, then STOPPED. A
        worker that failed stays in ERROR.
        """
        self._logger.info(f"Stopping {self.role} {self.worker_id}")
        failed = self._state == WorkerState.ERROR
        self._state = WorkerState.STOPPING
        await self.on_shutdown()
        self._state = WorkerState.ERROR if failed else WorkerState.STOPPED
        self._logger.info(f"{self.role.capitalize()} {self.worker_id} stopped")

    @abstractmethod
    async def on_shutdown(self) -> None:
        """Subclass hook for custom cleanup."""

    def heartbeat(self) -> None:
        self._last_heartbeat = datetime.now()
        if self._state == WorkerState.READY:
            self._state = WorkerState.RUNNING

    def record_failure(self, error: BaseException) -> None:
        """Count an unrecoverable error and move to ERROR."""
        self._error_count += 1
        self._state = WorkerState.ERROR
        self._logger.error(f"{self.role.capitalize()} {self.worker_id} failed: {error}", exc_info=error)

    def queue_size(self) -> int:
        return 0

    def health_check(self) -> WorkerHealth:
        """
        Return worker health status.

        Returns:
            WorkerHealth with the current state and counters
        """
        return WorkerHealth(
            healthy=(self._state in [WorkerState.READY, WorkerState.RUNNING]),
            state=self._state,
            last_heartbeat=self._last_heartbeat,
            queue_size=self.queue_size(),
            error_count=self._error_count,
            metadata={"worker_id": self.worker_id, "role": self.role, **self.describe()},
        )

    def describe(self) -> Dict[str, Any]:
        return {}

    def ready(self) -> bool:
        """True if the worker state is READY or RUNNING."""
        return self._state in [WorkerState.READY, WorkerState.RUNNING]


class SnapshotBoard:
    """Published parameter snapshots: one for self-play, one for targets.

    Values are replaced, never mutated, so readers may keep a reference.
    """

    def __init__(self, model: ModelSet, step: int = 0):
        self._lock = threading.Lock()
        self._selfplay = model.snapshot()
        self._target = model.snapshot()
        self.selfplay_step = step
        self.target_step = step

    @property
    def selfplay(self) -> ModelSet:
        with self._lock:
            return self._selfplay

    @property
    def target(self) -> ModelSet:
        with self._lock:
            return self._target

    def publish_selfplay(self, model: ModelSet, step: int) -> None:
        snapshot = model.snapshot()
        with self._lock:
            self._selfplay, self.selfplay_step = snapshot, step

    def publish_target(self, model: ModelSet, step: int) -> None:
        snapshot = model.snapshot()
        with self._lock:
            self._target, self.target_step = snapshot, step


class EnvStepBudget:
    """Shared counter of environment steps; hands out steps until the budget is spent."""

    def __init__(self, budget: int):
        self.budget = budget
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def exhausted(self) -> bool:
        return self._used >= self.budget

    def take(self, requested: int) -> int:
        with self._lock:
            granted = max(0, min(requested, self.budget - self._used))
            self._used += granted
            return granted


def supports_clone(env: Environment) -> bool:
    try:
        env.restore_state(env.clone_state())
    except (ProtocolError, NotImplementedError):
        return False
    return True


@dataclass
class _Slot:
    env: Environment
    history: FrameHistory
    recorder: EpisodeRecorder
    keep_states: bool
    episode_return: float = 0.0
    episode_length: int = 0


class SelfPlayActor(BaseWorker):
    """Plays ``envs_per_actor`` environments in lockstep with batched search.

    Every action is sampled from the visit distribution of a full search at
    the scheduled temperature, using the published self-play snapshot.
    Finished segments go straight into the replay buffer, stamped with the
    learner step current at collection time.
    """

    role = "actor"

    def __init__(
        self,
        worker_id: str,
        config: RunConfig,
        replay: ReplayBuffer,
        board: SnapshotBoard,
        budget: EnvStepBudget,
        seed: int,
    ):
        super().__init__(worker_id, config)
        self.replay = replay
        self.board = board
        self.budget = budget
        self.rng = np.random.default_rng(seed)
        self.env_steps = 0
        self.episodes = 0
        self.flushed = False
        self.slots: List[_Slot] = []
        pad = config.unroll_steps + config.td_steps
        for j in range(config.envs_per_actor):
            env = open_env(config, seed=seed + j)
            keep_states = supports_clone(env)
            self.slots.append(
                _Slot(
                    env=env,
                    history=FrameHistory(config.frames_stacked),
                    recorder=EpisodeRecorder(config.segment_length, pad, keep_env_states=keep_states),
                    keep_states=keep_states,
                )
            )
        env = self.slots[0].env
        self.clipping = config.reward_clipping if config.reward_clipping is not None else env.default_reward_clipping
        for slot in self.slots:
            self._start_episode(slot)

    async def on_startup(self) -> None:
        self._logger.debug(f"{len(self.slots)} environments of {self.config.env_name}")

    async def on_shutdown(self) -> None:
        self.flush()
        for slot in self.slots:
            slot.env.close()

    def describe(self) -> Dict[str, Any]:
        return {"env_steps": self.env_steps, "episodes": self.episodes}

    def _state_of(self, slot: _Slot) -> Any:
        return slot.env.clone_state() if slot.keep_states else None

    def _start_episode(self, slot: _Slot) -> None:
        observation = slot.env.reset()
        slot.recorder.start(slot.history.reset(observation), self._state_of(slot))
        slot.episode_return = 0.0
        slot.episode_length = 0

    def _append(self, segments: List[GameSegment]) -> None:
        for segment in segments:
            self.replay.append(segment)

    def flush(self) -> None:
        """Store every pending transition (used once the step budget is spent)."""
        if self.flushed:
            return
        for slot in self.slots:
            self._append(slot.recorder.flush())
        self.flushed = True

    def step(self, learner_step: int) -> List[Dict[str, Any]]:
        """Advance each environment one step; returns records of finished episodes."""
        granted = self.budget.take(len(self.slots))
        if granted == 0:
            return []
        active = self.slots[:granted]
        self.heartbeat()
        model = self.board.selfplay
        observations = np.stack([slot.history.stacked() for slot in active])
        results = search(
            model,
            observations,
            self.config,
            NoiseMode.TRAIN,
            self.rng,
            temperature=self.config.temperature(learner_step),
        )
        finished = []
        for slot, result in zip(active, results):
            try:
                outcome = slot.env.step(result.action)
            except ProtocolError as e:
                self._error_count += 1
                self._logger.warning(f"Environment protocol failure, restarting episode: {e}")
                self._append(slot.recorder.flush())
                self._start_episode(slot)
                continue
            self.env_steps += 1
            reward = clip_reward(outcome.reward) if self.clipping else outcome.reward
            slot.episode_return += outcome.reward
            slot.episode_length += 1
            stacked = slot.history.push(outcome.observation)
            self._append(
                slot.recorder.record(
                    result.action,
                    reward,
                    result.policy,
                    result.root_value,
                    learner_step,
                    stacked,
                    self._state_of(slot),
                )
            )
            if outcome.done:
                self._append(slot.recorder.finish())
                self.episodes += 1
                finished.append(
                    {
                        "kind": "episode",
                        "step": learner_step,
                        "actor": self.worker_id,
                        "return": slot.episode_return,
                        "length": slot.episode_length,
                    }
                )
                self._start_episode(slot)
        return finished


class ContextWorker(BaseWorker):
    """Samples replay positions and draws the random parts of their targets."""

    role = "context"

    def __init__(self, worker_id: str, config: RunConfig, replay: ReplayBuffer, seed: int):
        super().__init__(worker_id, config)
        self.replay = replay
        self.rng = np.random.default_rng(seed)
        self.produced = 0

    async def on_startup(self) -> None:
        pass

    async def on_shutdown(self) -> None:
        pass

    def make(self, learner_step: int) -> BatchContext:
        self.heartbeat()
        context = prepare_context(self.replay, self.config, learner_step, self.rng)
        self.produced += 1
        return context


class BatchWorker(BaseWorker):
    """Turns contexts into training batches with the published target snapshot."""

    role = "batch"

    def __init__(self, worker_id: str, config: RunConfig, board: SnapshotBoard, seed: int):
        super().__init__(worker_id, config)
        self.board = board
        self.rng = np.random.default_rng(seed)
        self.produced = 0

    async def on_startup(self) -> None:
        pass

    async def on_shutdown(self) -> None:
        pass

    def make(self, context: BatchContext) -> TrainBatch:
        self.heartbeat()
        batch = compute_targets(context, self.board.target, self.config, self.rng)
        self.produced += 1
        return batch


class Learner(BaseWorker):
    """Owns the trained model: optimizer steps, priority updates, snapshots and checkpoints."""

    role = "learner"

    def __init__(
        self,
        worker_id: str,
        config: RunConfig,
        model: ModelSet,
        replay: ReplayBuffer,
        board: SnapshotBoard,
        budget: EnvStepBudget,
        out_dir: Path,
        seed: int,
    ):
        super().__init__(worker_id, config)
        self.model = model
        self.replay = replay
        self.board = board
        self.budget = budget
        self.out_dir = Path(out_dir)
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.log_interval = max(1, config.checkpoint_interval // 10)

    async def on_startup(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)

    async def on_shutdown(self) -> None:
        pass

    def describe(self) -> Dict[str, Any]:
        return {"step": self.step}

    def checkpoint_path(self, label: Any) -> Path:
        return self.out_dir / f"checkpoint_{label}.ezck"

    def save(self, label: Any) -> Path:
        path = self.checkpoint_path(label)
        self.model.save(path, step=self.step, extra={"env_steps": self.budget.used})
        return path

    def learn(self, batch: TrainBatch, step: int) -> Dict[str, Any]:
        """One optimizer step; returns the metrics record for it."""
        self.heartbeat()
        report, errors = train_step(batch, self.model, self.config, step, self.rng)
        self.replay.update_priorities(batch.indices, errors)
        self.step = step + 1
        if self.step % self.config.selfplay_model_interval == 0:
            self.board.publish_selfplay(self.model, self.step)
        if self.step % self.config.target_model_interval == 0:
            self.board.publish_target(self.model, self.step)
        if self.step % self.config.checkpoint_interval == 0:
            self.save(self.step)
        record: Dict[str, Any] = {"kind": "train", "step": self.step}
        record.update(report.to_dict())
        record.update(
            {
                "lr": self.config.learning_rate(step),
                "beta": self.config.priority_beta(step),
                "temperature": self.config.temperature(step),
                "buffer_size": len(self.replay),
                "env_steps": self.budget.used,
                "staleness": float(np.mean(batch.staleness)),
            }
        )
        if self.step % self.log_interval == 0:
            self._logger.info(
                f"step {self.step}/{self.config.training_steps} loss {report.total:.4f} "
                f"env_steps {self.budget.used} buffer {len(self.replay)}"
            )
        return record
