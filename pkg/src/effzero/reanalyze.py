"""Training-target preparation.

Policy targets come from a fresh search for a ``reanalyze_policy_ratio``
share of positions and from the stored search policy otherwise. Value
targets are n-step returns; with off-policy correction the horizon shrinks
with data age and the bootstrap is the root value of a fresh search at
s_{t+l}; without it the horizon is k and the bootstrap is the target
network's value at s_{t+k}. Value-prefix targets are undiscounted running
reward sums that restart every ``lstm_reset_horizon`` unroll steps.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from effzero.codec import ScalarCodec
from effzero.config import RunConfig
from effzero.env import build_env, clip_reward, stack_frames
from effzero.mcts import run_batch, softmax
from effzero.model import InferenceOutput, ValuePrefixState
from effzero.replay import GameSegment, ReplayBuffer
from effzero.types import NoiseMode

logger = logging.getLogger(__name__)


def compute_horizon(current_step: int, collected_step: int, k: int, tau: float, total_steps: int) -> int:
    """l = clip(k - floor((T_current - T_s) / (tau * T_total)), 1, k)."""
    age = max(current_step - collected_step, 0)
    return int(np.clip(k - np.floor(age / (tau * total_steps)), 1, k))


def compute_value_target(
    rewards: Sequence[float],
    discount: float,
    horizon: int,
    root_value: Optional[float],
    correction_enabled: bool,
    target_value: Optional[float],
    terminal: bool = False,
) -> float:
    """z = sum_{i<l} gamma^i u_i + gamma^l * bootstrap.

    The bootstrap is ``root_value`` with correction enabled and
    ``target_value`` otherwise; it is dropped when the episode ends within
    the horizon (``terminal``), in which case ``rewards`` may be shorter
    than ``horizon``.
    """
    used = list(rewards)[:horizon]
    z = sum(discount**i * float(u) for i, u in enumerate(used))
    if not terminal:
        bootstrap = root_value if correction_enabled else target_value
        if bootstrap is None:
            raise ValueError("A bootstrap value is required for non-terminal targets")
        z += discount**horizon * float(bootstrap)
    return float(z)


@dataclass
class BatchContext:
    """Sampled positions plus every random draw target computation needs."""

    indices: np.ndarray
    weights: np.ndarray
    samples: List[Tuple[GameSegment, int]]
    step: int
    pad_actions: np.ndarray
    reanalyze_mask: np.ndarray


@dataclass
class TrainBatch:
    """One learner batch; L = unroll steps, A = actions.

    Attributes:
        observations: (B, *obs) stacked observations at t
        next_observations: (B, L, *obs) observations at t+1..t+L
        actions: (B, L)
        target_value_prefixes: (B, L) windowed running reward sums
        target_rewards: (B, L) per-step rewards
        target_values: (B, L+1)
        target_policies: (B, L+1, A)
        consistency_mask: (B, L) 1 where t+i+1 is recorded data
        weights: (B,) importance weights
        indices: (B,) replay indices
        staleness: (B,) learner steps since collection
    """

    observations: np.ndarray
    next_observations: np.ndarray
    actions: np.ndarray
    target_value_prefixes: np.ndarray
    target_rewards: np.ndarray
    target_values: np.ndarray
    target_policies: np.ndarray
    consistency_mask: np.ndarray
    weights: np.ndarray
    indices: np.ndarray
    staleness: np.ndarray

    def __len__(self) -> int:
        return int(self.observations.shape[0])


def prepare_context(
    buffer: ReplayBuffer,
    config: RunConfig,
    step: int,
    rng: np.random.Generator,
    batch_size: Optional[int] = None,
    indices: Optional[np.ndarray] = None,
) -> BatchContext:
    """Sample (or take) positions and draw the random pieces of their targets."""
    if indices is None:
        indices, weights = buffer.sample(batch_size or config.batch_size, config.priority_beta(step), rng)
    else:
        indices = np.asarray(indices, dtype=np.int64)
        weights = np.ones(indices.size)
    samples = [buffer.lookup(int(i)) for i in indices]
    return context_from_samples(samples, config, step, rng, indices=indices, weights=weights)


def context_from_samples(
    samples: List[Tuple[GameSegment, int]],
    config: RunConfig,
    step: int,
    rng: np.random.Generator,
    indices: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> BatchContext:
    batch = len(samples)
    action_space = samples[0][0].policies.shape[1]
    return BatchContext(
        indices=np.arange(batch) if indices is None else indices,
        weights=np.ones(batch) if weights is None else weights,
        samples=samples,
        step=step,
        pad_actions=rng.integers(action_space, size=(batch, config.unroll_steps)),
        reanalyze_mask=rng.random((batch, config.unroll_steps + 1)) < config.reanalyze_policy_ratio,
    )


def take_output(output: InferenceOutput, rows: Sequence[int]) -> InferenceOutput:
    rows = np.asarray(rows, dtype=np.int64)
    return InferenceOutput(
        latent=output.latent[rows],
        value=output.value[rows],
        value_prefix=output.value_prefix[rows],
        policy_logits=output.policy_logits[rows],
        vp_state=output.vp_state.take(rows),
    )


@dataclass
class _ValueRequest:
    rewards: np.ndarray
    horizon: int
    terminal: bool
    root: Optional[int]
    use_search: bool


class _RootTable:
    """Deduplicates (segment, position) observation roots across a batch."""

    def __init__(self) -> None:
        self.keys: Dict[Tuple[int, int], int] = {}
        self.observations: List[np.ndarray] = []
        self.needs_search: List[bool] = []

    def add(self, segment: GameSegment, position: int, search: bool) -> int:
        key = (id(segment), position)
        row = self.keys.get(key)
        if row is None:
            row = len(self.observations)
            self.keys[key] = row
            self.observations.append(segment.observations[position])
            self.needs_search.append(search)
        elif search:
            self.needs_search[row] = True
        return row


def compute_targets(
    context: BatchContext,
    model: Any,
    config: RunConfig,
    rng: np.random.Generator,
) -> TrainBatch:
    """Build a TrainBatch with one batched search over every distinct root."""
    L, k = config.unroll_steps, config.td_steps
    batch = len(context.samples)
    first_segment = context.samples[0][0]
    obs_shape = first_segment.observations.shape[1:]
    action_space = first_segment.policies.shape[1]
    dtype = first_segment.observations.dtype
    correction = config.use_off_policy_correction
    use_dynamic = correction and config.dynamic_horizon
    use_root_value = correction and config.mcts_root_value

    observations = np.zeros((batch,) + obs_shape, dtype=dtype)
    next_observations = np.zeros((batch, L) + obs_shape, dtype=dtype)
    actions = np.zeros((batch, L), dtype=np.int64)
    rewards = np.zeros((batch, L))
    value_prefixes = np.zeros((batch, L))
    mask = np.zeros((batch, L))
    policies = np.full((batch, L + 1, action_space), 1.0 / action_space)
    values = np.zeros((batch, L + 1))
    staleness = np.zeros(batch, dtype=np.int64)

    table = _RootTable()
    value_requests: Dict[Tuple[int, int], _ValueRequest] = {}
    policy_roots: Dict[Tuple[int, int], int] = {}
    truncated = 0

    for b, (segment, t) in enumerate(context.samples):
        n = len(segment)
        observations[b] = segment.observations[t]
        staleness[b] = context.step - int(segment.collection_steps[t])
        running = 0.0
        for i in range(L):
            position = t + i
            if position < n:
                actions[b, i] = segment.actions[position]
                rewards[b, i] = segment.rewards[position]
                next_observations[b, i] = segment.observations[position + 1]
                mask[b, i] = 1.0
            else:
                actions[b, i] = context.pad_actions[b, i]
            if i % config.lstm_reset_horizon == 0:
                running = 0.0
            running += rewards[b, i]
            value_prefixes[b, i] = running

        for i in range(L + 1):
            position = t + i
            if position >= n:
                continue
            if context.reanalyze_mask[b, i]:
                policy_roots[(b, i)] = table.add(segment, position, search=True)
            else:
                policies[b, i] = segment.policies[position]

            horizon = (
                compute_horizon(context.step, int(segment.collection_steps[position]), k, config.horizon_tau, config.training_steps)
                if use_dynamic
                else k
            )
            end = position + horizon
            terminal = False
            use_search = use_root_value
            if end >= n and segment.terminal:
                terminal = True
                horizon = n - position
                root = None
            else:
                if end > n:
                    truncated += 1
                    end, horizon, use_search = n, n - position, False
                root = table.add(segment, end, search=use_search)
            value_requests[(b, i)] = _ValueRequest(
                rewards=segment.rewards[position : position + horizon],
                horizon=horizon,
                terminal=terminal,
                root=root,
                use_search=use_search,
            )

    if truncated:
        logger.debug(f"{truncated} value targets lack s_(t+l); bootstrapped from the target network at the data end")

    root_values = np.zeros(len(table.observations))
    root_policies: Dict[int, np.ndarray] = {}
    target_net_values = np.zeros(len(table.observations))
    if table.observations:
        output = model.initial_inference(np.stack(table.observations))
        target_net_values = np.asarray(output.value, dtype=np.float64)
        search_rows = [row for row, needed in enumerate(table.needs_search) if needed]
        if search_rows:
            results = run_batch(take_output(output, search_rows), model, config, NoiseMode.REANALYZE, rng)
            for row, result in zip(search_rows, results):
                root_values[row] = result.root_value
                root_policies[row] = result.policy

    for (b, i), row in policy_roots.items():
        policies[b, i] = root_policies[row]
    for (b, i), request in value_requests.items():
        root = request.root
        values[b, i] = compute_value_target(
            request.rewards,
            config.discount,
            request.horizon,
            root_values[root] if root is not None and request.use_search else None,
            request.use_search,
            target_net_values[root] if root is not None else None,
            terminal=request.terminal,
        )

    codec = ScalarCodec(config.support_size, config.support_bins)
    saturated = codec.saturation_count(values) + codec.saturation_count(value_prefixes)
    if saturated:
        logger.debug(f"{saturated} value targets saturate the categorical support")

    return TrainBatch(
        observations=observations,
        next_observations=next_observations,
        actions=actions,
        target_value_prefixes=value_prefixes,
        target_rewards=rewards,
        target_values=values,
        target_policies=policies,
        consistency_mask=mask,
        weights=np.asarray(context.weights, dtype=np.float64),
        indices=np.asarray(context.indices, dtype=np.int64),
        staleness=staleness,
    )


def reanalyze_targets(
    buffer: ReplayBuffer,
    indices: np.ndarray,
    target_model: Any,
    config: RunConfig,
    step: int,
    rng: np.random.Generator,
) -> TrainBatch:
    """Targets for explicit replay indices (unit importance weights)."""
    context = prepare_context(buffer, config, step, rng, indices=indices)
    return compute_targets(context, target_model, config, rng)


# --- value-error diagnostic ---


def monte_carlo_value(
    config: RunConfig,
    model: Any,
    env_state: Any,
    stacked_observation: np.ndarray,
    rollouts: int,
    rng: np.random.Generator,
    max_steps: int = 1000,
) -> float:
    """Mean discounted return of ``model``'s policy head from a stored env state."""
    envs = [build_env(config.env_name, seed=config.seed, options=config.env_options) for _ in range(rollouts)]
    for env in envs:
        env.restore_state(env_state)
    clipping = config.reward_clipping if config.reward_clipping is not None else envs[0].default_reward_clipping
    frames = config.frames_stacked
    channels = stacked_observation.shape[0] // frames
    history = [stacked_observation[j * channels : (j + 1) * channels] for j in range(frames)]
    histories = [list(history) for _ in range(rollouts)]
    returns = np.zeros(rollouts)
    alive = np.ones(rollouts, dtype=bool)
    scale = 1.0
    for _ in range(max_steps):
        rows = np.nonzero(alive)[0]
        if rows.size == 0:
            break
        stacked = np.stack([stack_frames(histories[r], frames) for r in rows])
        probs = softmax(model.initial_inference(stacked).policy_logits)
        for r, p in zip(rows, probs):
            result = envs[r].step(int(rng.choice(p.size, p=p)))
            reward = clip_reward(result.reward) if clipping else result.reward
            returns[r] += scale * reward
            histories[r] = histories[r][1:] + [result.observation]
            if result.done:
                alive[r] = False
        scale *= config.discount
    return float(returns.mean())


def measure_value_error(
    buffer: ReplayBuffer,
    model: Any,
    config: RunConfig,
    correction: bool,
    rng: np.random.Generator,
    step: Optional[int] = None,
    rollouts: int = 1000,
    max_samples: int = 64,
    stages: int = 4,
) -> Dict[str, Any]:
    """Mean L1 error of value targets against Monte-Carlo ground truth.

    Reports the error at the sampled state ("current"), at the unrolled
    states t+1..t+L ("unrolled"), over both ("all"), and per data-age
    stage (equal-count bins of collection step).

    ``step`` is the learner step the targets are computed at (data ages are
    measured in learner steps); it defaults to the model's ``training_steps``.
    """
    settings = config.model_copy(update={"use_off_policy_correction": correction})
    step = int(getattr(model, "training_steps", 0)) if step is None else step
    live = [
        (segment, offset)
        for segment in buffer.segments()
        if segment.env_states is not None
        for offset in range(segment.owned)
    ]
    if not live:
        raise ValueError("Replay snapshot holds no transitions with environment states")
    chosen = rng.choice(len(live), size=min(max_samples, len(live)), replace=False)
    chosen = np.sort(chosen)
    samples = [live[i] for i in chosen]
    context = context_from_samples(samples, settings, step, rng)
    batch = compute_targets(context, model, settings, rng)

    L = settings.unroll_steps
    current_errors: List[float] = []
    unrolled_errors: List[float] = []
    per_sample: List[Tuple[int, float]] = []
    for b, (segment, t) in enumerate(samples):
        sample_errors = []
        for i in range(L + 1):
            position = t + i
            if position >= len(segment):
                if not segment.terminal:
                    continue
                truth = 0.0
            else:
                truth = monte_carlo_value(
                    settings, model, segment.env_states[position], segment.observations[position], rollouts, rng
                )
            error = abs(batch.target_values[b, i] - truth)
            (current_errors if i == 0 else unrolled_errors).append(error)
            sample_errors.append(error)
        per_sample.append((int(segment.collection_steps[t]), float(np.mean(sample_errors))))

    order = sorted(range(len(per_sample)), key=lambda j: per_sample[j][0])
    by_stage = []
    for stage, members in enumerate(np.array_split(np.asarray(order), min(stages, len(order)))):
        if members.size == 0:
            continue
        steps = [per_sample[j][0] for j in members]
        by_stage.append(
            {
                "stage": stage,
                "min_step": min(steps),
                "max_step": max(steps),
                "error": float(np.mean([per_sample[j][1] for j in members])),
            }
        )
    all_errors = current_errors + unrolled_errors
    return {
        "correction": correction,
        "step": int(step),
        "samples": len(samples),
        "rollouts": rollouts,
        "current": float(np.mean(current_errors)),
        "unrolled": float(np.mean(unrolled_errors)) if unrolled_errors else 0.0,
        "all": float(np.mean(all_errors)),
        "by_stage": by_stage,
    }
