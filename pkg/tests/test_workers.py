"""Tests for the pipeline workers and their shared state."""

import numpy as np
import pytest

from effzero.env import Catcher
from effzero.model import ModelSet
from effzero.replay import ReplayBuffer
from effzero.types import WorkerState
from effzero.workers import (
    BaseWorker,
    BatchWorker,
    ContextWorker,
    EnvStepBudget,
    Learner,
    SelfPlayActor,
    SnapshotBoard,
    supports_clone,
)

CATCHER_OBS = (4, 5, 5)


class MinimalWorker(BaseWorker):
    """Minimal test worker implementation."""

    async def on_startup(self) -> None:
        """Test startup hook."""
        self.started = True

    async def on_shutdown(self) -> None:
        """Test shutdown hook."""
        self.stopped = True


@pytest.mark.asyncio
async def test_worker_lifecycle(tiny_config):
    """Test startup, heartbeat and shutdown state transitions."""
    worker = MinimalWorker("test-worker", tiny_config)
    assert worker.state == WorkerState.INITIALIZING
    assert worker.ready() is False

    await worker.startup()
    assert worker.state == WorkerState.READY
    assert worker.started is True
    assert worker.ready() is True

    worker.heartbeat()
    assert worker.state == WorkerState.RUNNING

    health = worker.health_check()
    assert health.healthy is True
    assert health.metadata["worker_id"] == "test-worker"
    assert health.error_count == 0

    await worker.shutdown()
    assert worker.state == WorkerState.STOPPED
    assert worker.stopped is True
    assert worker.ready() is False


@pytest.mark.asyncio
async def test_failed_worker_stays_in_error(tiny_config):
    """Test a recorded failure survives shutdown and marks the worker unhealthy."""
    worker = MinimalWorker("failing-worker", tiny_config)
    await worker.startup()

    worker.record_failure(RuntimeError("boom"))
    await worker.shutdown()

    assert worker.state == WorkerState.ERROR
    assert worker.error_count == 1
    assert worker.health_check().healthy is False


def test_worker_logger_does_not_propagate(tiny_config):
    """Test each worker gets its own named, non-propagating logger."""
    worker = MinimalWorker("logger-worker", tiny_config)
    assert worker._logger.name == "effzero.logger-worker"
    assert worker._logger.propagate is False


def test_env_step_budget():
    """Test the budget grants steps until spent, then only zero."""
    budget = EnvStepBudget(5)

    assert budget.take(3) == 3
    assert budget.take(3) == 2
    assert budget.exhausted
    assert budget.take(1) == 0
    assert budget.used == 5


def test_snapshot_board_publishes_copies(tiny_config):
    """Test published snapshots are independent of the live model."""
    model = ModelSet(tiny_config, CATCHER_OBS, 3)
    board = SnapshotBoard(model)
    first = board.selfplay

    board.publish_selfplay(model, step=3)
    name, param = model.named_parameters()[0]
    param.data += 1.0

    assert board.selfplay_step == 3
    assert board.selfplay is not first
    published = dict(board.selfplay.named_parameters())[name]
    assert not np.array_equal(published.data, param.data)
    assert board.target_step == 0


def test_supports_clone():
    """Test built-in environments support state cloning."""
    assert supports_clone(Catcher())


@pytest.mark.asyncio
async def test_selfplay_actor_spends_the_budget(config_factory):
    """Test the actor plays whole episodes and stores every transition."""
    config = config_factory(envs_per_actor=2)
    replay = ReplayBuffer(capacity=200, min_size=1)
    board = SnapshotBoard(ModelSet(config, CATCHER_OBS, 3))
    budget = EnvStepBudget(12)
    actor = SelfPlayActor("actor-0", config, replay, board, budget, seed=0)
    await actor.startup()

    records = []
    while not budget.exhausted:
        records += actor.step(learner_step=0)
    await actor.shutdown()

    assert actor.env_steps == 12
    assert actor.episodes == 2
    assert [r["length"] for r in records] == [4, 4]
    assert all(r["return"] in (-1.0, 1.0) for r in records)
    assert len(replay) == 12
    assert actor.step(learner_step=0) == []
    assert actor.state == WorkerState.STOPPED


@pytest.mark.asyncio
async def test_learner_loop(tiny_config, filled_replay, tmp_path):
    """Test contexts become batches and learner steps publish snapshots and checkpoints."""
    config = tiny_config
    model = ModelSet(config, CATCHER_OBS, 3)
    board = SnapshotBoard(model)
    budget = EnvStepBudget(config.env_steps_budget)
    contexts = ContextWorker("context-0", config, filled_replay, seed=1)
    batches = BatchWorker("batch-0", config, board, seed=2)
    learner = Learner("learner", config, model, filled_replay, board, budget, tmp_path / "run", seed=3)
    for worker in (contexts, batches, learner):
        await worker.startup()

    records = []
    for step in range(config.checkpoint_interval):
        batch = batches.make(contexts.make(step))
        assert len(batch) == config.batch_size
        records.append(learner.learn(batch, step))

    assert learner.step == config.checkpoint_interval
    assert model.training_steps == config.checkpoint_interval
    assert board.selfplay_step == 6
    assert board.target_step == 4
    assert learner.checkpoint_path(6).exists()
    assert contexts.produced == batches.produced == config.checkpoint_interval
    assert [r["step"] for r in records] == list(range(1, 7))
    assert all(np.isfinite(r["total"]) for r in records)
    assert records[0]["lr"] == config.learning_rate(0)
    assert learner.health_check().metadata["step"] == 6
