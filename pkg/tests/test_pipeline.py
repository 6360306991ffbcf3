"""Tests for the training pipeline and evaluation."""

import numpy as np
import pytest

from effzero.env import Catcher
from effzero.metrics import read_metrics
from effzero.model import ModelSet
from effzero.pipeline import (
    PipelineError,
    TrainingRun,
    WorkerTopology,
    evaluate,
    normalized_score,
    observation_spec,
    run_training,
)
from effzero.oracles import uniform_return
from effzero.types import PipelineMode, WorkerState
from effzero.workers import Learner

CATCHER_OBS = (4, 5, 5)


def test_worker_topology_validation():
    """Test worker counts and queue capacity must be positive."""
    assert WorkerTopology().mode == PipelineMode.SERIAL
    with pytest.raises(ValueError, match="num_batch_workers"):
        WorkerTopology(num_batch_workers=0)


def test_worker_topology_from_config(config_factory):
    """Test the topology mirrors the config fields."""
    topology = WorkerTopology.from_config(config_factory(num_actors=2, pipeline_mode="parallel"))
    assert topology.num_actors == 2
    assert topology.mode == PipelineMode.PARALLEL


def test_normalized_score():
    """Test (score - random) / (reference - random) and the degenerate case."""
    assert normalized_score(5.0, 0.0, 10.0) == 0.5
    assert normalized_score(-1.0, -1.0, 1.0) == 0.0
    with pytest.raises(ValueError, match="differ"):
        normalized_score(1.0, 2.0, 2.0)


def test_observation_spec(config_factory):
    """Test stacked observation shapes for the built-in environments."""
    assert observation_spec(config_factory()) == (CATCHER_OBS, 3)
    assert observation_spec(config_factory(env_name="deepsea", env_options={"size": 6})) == ((2, 6, 6), 2)


def test_min_replay_size_must_fit(config_factory, tmp_path):
    """Test warm-up larger than the env budget is refused up front."""
    with pytest.raises(ValueError, match="env_steps_budget"):
        TrainingRun(config_factory(min_replay_size=100), tmp_path)


def test_serial_runs_are_reproducible(tiny_config, tmp_path):
    """Test two serial runs with one seed write identical metrics."""
    first = run_training(tiny_config, tmp_path / "a", final_evaluation=False)
    second = run_training(tiny_config, tmp_path / "b", final_evaluation=False)

    assert first.learner_steps == tiny_config.training_steps
    assert first.env_steps == tiny_config.env_steps_budget
    assert first.checkpoint.exists()
    assert (tmp_path / "a" / "config.yaml").exists()
    assert (tmp_path / "a" / "replay_final.ezck").exists()
    assert first.metrics.read_bytes() == second.metrics.read_bytes()

    records, malformed = read_metrics(first.metrics)
    assert malformed == 0
    train = [r for r in records if r["kind"] == "train"]
    assert [r["step"] for r in train] == list(range(1, tiny_config.training_steps + 1))
    assert [r["step"] for r in records if r["kind"] == "eval"] == [6, 12]
    assert any(r["kind"] == "episode" for r in records)


def test_final_checkpoint_loads(tiny_config, tmp_path):
    """Test the final checkpoint restores the trained model and its step counts."""
    result = run_training(tiny_config, tmp_path, final_evaluation=True)

    model, metadata = ModelSet.load(result.checkpoint)

    assert model.training_steps == tiny_config.training_steps
    assert metadata["env_steps"] == tiny_config.env_steps_budget
    assert result.evaluation is not None
    assert len(result.evaluation.returns) == tiny_config.evaluation_episodes
    assert all(h.state == WorkerState.STOPPED for h in result.health.values())


def test_parallel_run_completes(config_factory, tmp_path):
    """Test the queued schedule reaches the step target with several workers."""
    config = config_factory(pipeline_mode="parallel", num_context_workers=2, queue_capacity=2)

    result = run_training(config, tmp_path, final_evaluation=False)

    assert result.learner_steps == config.training_steps
    records, _ = read_metrics(result.metrics)
    assert len([r for r in records if r["kind"] == "train"]) == config.training_steps
    assert result.env_steps <= config.env_steps_budget


def test_worker_failure_raises_pipeline_error(tiny_config, tmp_path, monkeypatch):
    """Test a failing learner surfaces as PipelineError with a partial checkpoint."""

    def broken(self, batch, step):
        raise RuntimeError("optimizer exploded")

    monkeypatch.setattr(Learner, "learn", broken)

    with pytest.raises(PipelineError) as exc_info:
        run_training(tiny_config, tmp_path)

    assert exc_info.value.worker_id == "learner"
    assert "optimizer exploded" in str(exc_info.value)
    assert exc_info.value.checkpoint is not None
    assert exc_info.value.checkpoint.exists()


def test_evaluate_model(tiny_config):
    """Test evaluation plays whole Catcher episodes and normalizes on request."""
    model = ModelSet(tiny_config, CATCHER_OBS, 3)

    report = evaluate(model, episodes=3, reference={"catcher": (-1.0, 1.0)})

    assert len(report.returns) == 3
    assert all(r in (-1.0, 1.0) for r in report.returns)
    assert report.normalized == pytest.approx((report.mean + 1.0) / 2.0)
    assert report.metadata["env_name"] == "catcher"
    assert report.metadata["greedy"] is True


def test_evaluate_checkpoint_path(tiny_config, tmp_path):
    """Test evaluate accepts a checkpoint path."""
    path = tmp_path / "model.ezck"
    ModelSet(tiny_config, CATCHER_OBS, 3).save(path, step=0)

    report = evaluate(path, episodes=2, greedy=False)

    assert len(report.returns) == 2
    assert report.normalized is None


def test_sampled_evaluation_of_fresh_model_matches_uniform_play(config_factory):
    """Test a zero-initialized model sampling its visit policy plays like uniform random play.

    Flat priors and equal values make three simulations visit each action
    once, so the sampled policy is uniform.
    """
    config = config_factory(num_simulations=3)
    model = ModelSet(config, CATCHER_OBS, 3)
    episodes = 400
    expected = []
    for i in range(episodes):
        env = Catcher(seed=11 + i)
        env.reset()
        expected.append(uniform_return(env))

    report = evaluate(model, episodes=episodes, greedy=False, seed=11)

    assert report.mean == pytest.approx(float(np.mean(expected)), abs=0.25)


def test_evaluate_rejects_mismatched_env(tiny_config):
    """Test evaluating on an environment of another shape fails clearly."""
    model = ModelSet(tiny_config, CATCHER_OBS, 3)
    with pytest.raises(ValueError, match="expects"):
        evaluate(model, episodes=1, env_name="deepsea")


@pytest.mark.slow
def test_catcher_learns(config_factory, tmp_path):
    """Test a short run catches more fruit than it drops."""
    config = config_factory(
        training_steps=400,
        env_steps_budget=2000,
        min_replay_size=100,
        batch_size=32,
        num_simulations=16,
        latent_dim=32,
        head_hidden=32,
        lstm_hidden=16,
        checkpoint_interval=200,
        evaluation_episodes=20,
        lr_initial=0.05,
        lr_decayed=0.005,
        lr_decay_steps=300,
    )

    result = run_training(config, tmp_path)

    assert result.evaluation.mean > 0.0
