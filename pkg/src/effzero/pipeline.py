"""Training orchestration and evaluation.

Two schedules share the same workers:

- serial: one thread interleaves actor -> context -> batch -> learner per
  learner step, so a fixed seed reproduces the metrics stream bit for bit;
- parallel: asyncio tasks connected by two bounded queues (contexts, then
  batches), with the numeric work pushed to threads.

Environment interaction stops at ``env_steps_budget`` while the learner
keeps going to ``training_steps``.
"""

import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from effzero.config import RunConfig, save_config
from effzero.env import FrameHistory
from effzero.mcts import search
from effzero.metrics import MetricsWriter
from effzero.model import ModelSet
from effzero.protocol import open_env
from effzero.replay import ReplayBuffer
from effzero.types import EvalReport, NoiseMode, PipelineMode
from effzero.workers import (
    BaseWorker,
    BatchWorker,
    ContextWorker,
    EnvStepBudget,
    Learner,
    SelfPlayActor,
    SnapshotBoard,
)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A worker failed; ``worker_id`` names it and ``checkpoint`` is the partial save."""

    def __init__(self, worker_id: str, message: str, checkpoint: Optional[Path] = None):
        super().__init__(f"Worker {worker_id} failed: {message}")
        self.worker_id = worker_id
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class WorkerTopology:
    num_actors: int = 1
    num_context_workers: int = 1
    num_batch_workers: int = 1
    queue_capacity: int = 8
    mode: PipelineMode = PipelineMode.SERIAL

    def __post_init__(self) -> None:
        counts = {
            "num_actors": self.num_actors,
            "num_context_workers": self.num_context_workers,
            "num_batch_workers": self.num_batch_workers,
            "queue_capacity": self.queue_capacity,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")

    @classmethod
    def from_config(cls, config: RunConfig) -> "WorkerTopology":
        return cls(
            num_actors=config.num_actors,
            num_context_workers=config.num_context_workers,
            num_batch_workers=config.num_batch_workers,
            queue_capacity=config.queue_capacity,
            mode=PipelineMode(config.pipeline_mode),
        )


@dataclass
class TrainingResult:
    checkpoint: Path
    metrics: Path
    learner_steps: int
    env_steps: int
    evaluation: Optional[EvalReport] = None
    health: Dict[str, Any] = field(default_factory=dict)


def observation_spec(config: RunConfig) -> Tuple[Tuple[int, int, int], int]:
    """Stacked observation shape and action count of the configured environment."""
    env = open_env(config, seed=config.seed)
    try:
        channels, height, width = env.observation_shape
        return (channels * config.frames_stacked, height, width), env.action_space
    finally:
        env.close()


def normalized_score(score: float, random_score: float, reference_score: float) -> float:
    """(score - random) / (reference - random)."""
    if reference_score == random_score:
        raise ValueError("reference and random scores must differ")
    return (score - random_score) / (reference_score - random_score)


def evaluate(
    source: Union[ModelSet, str, Path],
    episodes: Optional[int] = None,
    env_name: Optional[str] = None,
    config: Optional[RunConfig] = None,
    greedy: bool = True,
    seed: int = 0,
    reference: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> EvalReport:
    """Play ``episodes`` episodes with search and no root noise.

    Args:
        source: a model or a checkpoint path
        env_name: environment to play (defaults to the one the model was trained on)
        greedy: act by argmax visits; otherwise sample pi at temperature 1
        reference: optional ``{env_name: (random_score, reference_score)}`` table
            used to fill ``EvalReport.normalized``

    Raises:
        ValueError: If the environment does not match the model's observation
            shape or action count
    """
    if isinstance(source, ModelSet):
        model = source
    else:
        model, _ = ModelSet.load(source)
    config = config or model.config
    name = env_name or model.env_name
    episodes = episodes or config.evaluation_episodes
    settings = config.model_copy(update={"env_name": name})
    obs_shape, action_space = observation_spec(settings)
    if obs_shape != model.obs_shape or action_space != model.action_space:
        raise ValueError(
            f"Environment {name} gives observations {obs_shape} with {action_space} actions; "
            f"the model expects {model.obs_shape} with {model.action_space}"
        )

    rng = np.random.default_rng(seed)
    envs = [open_env(settings, seed=seed + i) for i in range(episodes)]
    histories = [FrameHistory(settings.frames_stacked) for _ in envs]
    for env, history in zip(envs, histories):
        history.reset(env.reset())
    returns = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    while alive.any():
        rows = np.nonzero(alive)[0]
        observations = np.stack([histories[r].stacked() for r in rows])
        results = search(model, observations, settings, NoiseMode.EVAL, rng, greedy=greedy)
        for r, result in zip(rows, results):
            outcome = envs[r].step(result.action)
            returns[r] += outcome.reward
            histories[r].push(outcome.observation)
            if outcome.done:
                alive[r] = False
    for env in envs:
        env.close()

    normalized = None
    if reference and name in reference:
        random_score, reference_score = reference[name]
        normalized = normalized_score(float(returns.mean()), random_score, reference_score)
    return EvalReport(
        returns=returns.tolist(),
        mean=float(returns.mean()),
        median=float(np.median(returns)),
        normalized=normalized,
        metadata={"env_name": name, "episodes": episodes, "greedy": greedy, "step": model.training_steps},
    )


class TrainingRun:
    """Everything one run owns: model, replay, snapshots, workers and the metrics stream."""

    def __init__(self, config: RunConfig, out_dir: Union[str, Path]):
        for limit in ("env_steps_budget", "capacity"):
            if config.min_replay_size > getattr(config, limit):
                raise ValueError(
                    f"min_replay_size={config.min_replay_size} exceeds {limit}={getattr(config, limit)}"
                )
        self.config = config
        self.topology = WorkerTopology.from_config(config)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, self.out_dir / "config.yaml")

        obs_shape, action_space = observation_spec(config)
        self.model = ModelSet(config, obs_shape, action_space, env_name=config.env_name)
        self.replay = ReplayBuffer(config.capacity, config.priority_alpha, config.min_replay_size)
        self.board = SnapshotBoard(self.model)
        self.budget = EnvStepBudget(config.env_steps_budget)

        seeds = np.random.SeedSequence(config.seed).generate_state(
            self.topology.num_actors + self.topology.num_context_workers + self.topology.num_batch_workers + 2
        )
        seeds = [int(s) for s in seeds]
        self.actors = [
            SelfPlayActor(f"actor-{i}", config, self.replay, self.board, self.budget, seeds.pop(0))
            for i in range(self.topology.num_actors)
        ]
        self.context_workers = [
            ContextWorker(f"context-{i}", config, self.replay, seeds.pop(0))
            for i in range(self.topology.num_context_workers)
        ]
        self.batch_workers = [
            BatchWorker(f"batch-{i}", config, self.board, seeds.pop(0))
            for i in range(self.topology.num_batch_workers)
        ]
        self.learner = Learner(
            "learner", config, self.model, self.replay, self.board, self.budget, self.out_dir, seeds.pop(0)
        )
        self.eval_seed = seeds.pop(0)
        self.metrics = MetricsWriter(self.out_dir / "metrics.jsonl")

    @property
    def workers(self) -> List[BaseWorker]:
        return [*self.actors, *self.context_workers, *self.batch_workers, self.learner]

    def health(self) -> Dict[str, Any]:
        return {w.worker_id: w.health_check() for w in self.workers}

    def _write_all(self, records: List[Dict[str, Any]]) -> None:
        for record in records:
            self.metrics.write(record)

    def _flush_actors(self) -> None:
        for actor in self.actors:
            actor.flush()

    def _evaluate(self) -> EvalReport:
        report = evaluate(self.model.snapshot(), config=self.config, seed=self.eval_seed)
        self.metrics.write(
            {
                "kind": "eval",
                "step": self.learner.step,
                "env_steps": self.budget.used,
                "mean": report.mean,
                "median": report.median,
                "episodes": len(report.returns),
            }
        )
        self.learner._logger.info(f"Evaluation at step {self.learner.step}: mean return {report.mean:.3f}")
        return report

    def _after_learn(self, record: Dict[str, Any]) -> None:
        self.metrics.write(record)
        if self.learner.step % self.config.checkpoint_interval == 0:
            self._evaluate()

    def _warm_up(self) -> None:
        actor = self.actors[0]
        while len(self.replay) < self.config.min_replay_size and not self.budget.exhausted:
            self._write_all(actor.step(0))
        if len(self.replay) < self.config.min_replay_size:
            self._flush_actors()

    def _env_step_target(self, step: int, warmup_steps: int) -> int:
        remaining = self.config.env_steps_budget - warmup_steps
        return min(
            self.config.env_steps_budget,
            warmup_steps + ((step + 1) * remaining) // self.config.training_steps,
        )

    @staticmethod
    def _serial(worker: BaseWorker, fn: Any, *args: Any) -> Any:
        try:
            return fn(*args)
        except Exception as e:
            worker.record_failure(e)
            raise PipelineError(worker.worker_id, str(e)) from e

    def run_serial(self) -> None:
        """Single-threaded actor -> context -> batch -> learner interleaving."""
        actor = self.actors[0]
        context_worker = self.context_workers[0]
        batch_worker = self.batch_workers[0]
        self._serial(actor, self._warm_up)
        warmup_steps = self.budget.used
        for step in range(self.config.training_steps):
            target = self._env_step_target(step, warmup_steps)
            while self.budget.used < target:
                self._write_all(self._serial(actor, actor.step, step))
            if self.budget.exhausted:
                self._serial(actor, self._flush_actors)
            context = self._serial(context_worker, context_worker.make, step)
            batch = self._serial(batch_worker, batch_worker.make, context)
            record = self._serial(self.learner, self.learner.learn, batch, step)
            self._serial(self.learner, self._after_learn, record)

    async def _serial_session(self) -> None:
        for worker in self.workers:
            await worker.startup()
        try:
            self.run_serial()
        finally:
            for worker in self.workers:
                await worker.shutdown()

    async def run_parallel(self) -> None:
        """Actors, context workers, batch workers and the learner as concurrent tasks."""
        contexts: asyncio.Queue = asyncio.Queue(maxsize=self.topology.queue_capacity)
        batches: asyncio.Queue = asyncio.Queue(maxsize=self.topology.queue_capacity)
        replay_ready = asyncio.Event()
        stop = asyncio.Event()

        def check_ready() -> None:
            if len(self.replay) >= self.config.min_replay_size:
                replay_ready.set()

        async def actor_loop(actor: SelfPlayActor) -> None:
            while not stop.is_set():
                if self.budget.exhausted:
                    actor.flush()
                    check_ready()
                    await stop.wait()
                    break
                self._write_all(await asyncio.to_thread(actor.step, self.learner.step))
                check_ready()

        async def context_loop(worker: ContextWorker) -> None:
            await replay_ready.wait()
            while not stop.is_set():
                await contexts.put(await asyncio.to_thread(worker.make, self.learner.step))

        async def batch_loop(worker: BatchWorker) -> None:
            while not stop.is_set():
                context = await contexts.get()
                await batches.put(await asyncio.to_thread(worker.make, context))

        async def learner_loop() -> None:
            for step in range(self.config.training_steps):
                batch = await batches.get()
                self._after_learn(await asyncio.to_thread(self.learner.learn, batch, step))

        def guarded(worker: BaseWorker, coro: Any) -> "asyncio.Task[None]":
            async def run() -> None:
                try:
                    await coro
                except asyncio.CancelledError:
                    raise
                except Exception as e:
                    worker.record_failure(e)
                    raise PipelineError(worker.worker_id, str(e)) from e

            return asyncio.create_task(run(), name=worker.worker_id)

        for worker in self.workers:
            await worker.startup()
        tasks = [guarded(a, actor_loop(a)) for a in self.actors]
        tasks += [guarded(w, context_loop(w)) for w in self.context_workers]
        tasks += [guarded(w, batch_loop(w)) for w in self.batch_workers]
        learner_task = guarded(self.learner, learner_loop())
        tasks.append(learner_task)
        try:
            while True:
                done, _ = await asyncio.wait(tasks, return_when=asyncio.FIRST_COMPLETED)
                failed = [t for t in done if not t.cancelled() and t.exception() is not None]
                if failed:
                    raise failed[0].exception()  # type: ignore[misc]
                if learner_task in done:
                    break
                tasks = [t for t in tasks if t not in done]
        finally:
            stop.set()
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            drained = self._drain(contexts) + self._drain(batches)
            if drained:
                logger.info(f"Discarded {drained} queued items at shutdown")
            for worker in self.workers:
                await worker.shutdown()

    @staticmethod
    def _drain(queue: asyncio.Queue) -> int:
        count = 0
        while not queue.empty():
            queue.get_nowait()
            count += 1
        return count

    def _partial_checkpoint(self) -> Optional[Path]:
        try:
            return self.learner.save("partial")
        except Exception as e:
            logger.error(f"Could not write partial checkpoint: {e}", exc_info=True)
            return None

    def run(self, final_evaluation: bool = True) -> TrainingResult:
        """Run the configured schedule to ``training_steps`` learner steps.

        Raises:
            PipelineError: If any worker fails; a partial checkpoint is written first
        """
        logger.info(
            f"Training on {self.config.env_name} ({self.topology.mode.value}) for "
            f"{self.config.training_steps} steps, env budget {self.config.env_steps_budget}"
        )
        try:
            if self.topology.mode == PipelineMode.SERIAL:
                asyncio.run(self._serial_session())
            else:
                asyncio.run(self.run_parallel())
        except PipelineError as e:
            e.checkpoint = self._partial_checkpoint()
            self.metrics.close()
            raise
        except Exception as e:
            worker = self.learner
            worker.record_failure(e)
            checkpoint = self._partial_checkpoint()
            self.metrics.close()
            raise PipelineError(worker.worker_id, str(e), checkpoint) from e

        try:
            checkpoint = self.learner.save("final")
            self.replay.save(self.out_dir / "replay_final.ezck")
            evaluation = self._evaluate() if final_evaluation else None
        finally:
            self.metrics.close()
        return TrainingResult(
            checkpoint=checkpoint,
            metrics=self.metrics.path,
            learner_steps=self.learner.step,
            env_steps=self.budget.used,
            evaluation=evaluation,
            health=self.health(),
        )


def run_training(config: RunConfig, out_dir: Union[str, Path], final_evaluation: bool = True) -> TrainingResult:
    """Train with ``config``, writing config snapshot, metrics and checkpoints under ``out_dir``."""
    return TrainingRun(config, out_dir).run(final_evaluation=final_evaluation)
