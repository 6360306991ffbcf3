"""Loss assembly over the unrolled model and the optimizer step."""

import logging
from dataclasses import replace
from typing import Optional, Tuple

import numpy as np

from effzero.config import RunConfig
from effzero.model import ModelSet
from effzero.optim import sgd_step, weight_decay_term
from effzero.reanalyze import TrainBatch
from effzero.tensorcore import (
    NonFiniteError,
    Tensor,
    backward,
    l2_normalize,
    no_grad,
    scale_gradient,
)
from effzero.types import LossReport

logger = logging.getLogger(__name__)


def shift_and_scale(observations: np.ndarray, shifts: np.ndarray, intensities: np.ndarray) -> np.ndarray:
    """Translate each image by ``shifts[b] = (dy, dx)`` with edge padding, then scale it.

    Args:
        observations: (B, C, H, W)
        shifts: (B, 2) integer offsets
        intensities: (B,) multipliers
    """
    observations = np.asarray(observations)
    shifts = np.asarray(shifts, dtype=np.int64)
    pad = int(np.abs(shifts).max()) if shifts.size else 0
    _, _, height, width = observations.shape
    padded = np.pad(observations, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = np.empty_like(observations)
    for b, (dy, dx) in enumerate(shifts):
        out[b] = padded[b, :, pad + dy : pad + dy + height, pad + dx : pad + dx + width]
    scale = np.asarray(intensities, dtype=observations.dtype).reshape(-1, 1, 1, 1)
    return out * scale


def data_augment(
    observations: np.ndarray,
    rng: np.random.Generator,
    max_shift: int,
    intensity_scale: float,
) -> np.ndarray:
    """Random shift of 0..max_shift pixels plus intensity jitter ``1 + scale * clip(N(0,1), -2, 2)``."""
    batch = observations.shape[0]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(batch, 2))
    intensities = 1.0 + intensity_scale * np.clip(rng.standard_normal(batch), -2.0, 2.0)
    return shift_and_scale(observations, shifts, intensities)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row CE between a target distribution and softmax(logits); shape (B,)."""
    return -(logits.log_softmax(axis=-1) * Tensor(np.asarray(target, dtype=logits.dtype))).sum(axis=-1)


def negative_cosine_similarity(online: Tensor, target: Tensor) -> Tensor:
    """-cos(online, target) per row; shape (B,)."""
    return -(l2_normalize(online, axis=-1) * l2_normalize(target, axis=-1)).sum(axis=-1)


def _augmented(batch: TrainBatch, config: RunConfig, rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, np.ndarray]:
    observations, next_observations = batch.observations, batch.next_observations
    if not config.use_data_augmentation or rng is None:
        return observations, next_observations
    observations = data_augment(observations, rng, config.augment_max_shift, config.augment_intensity_scale)
    flat = next_observations.reshape((-1,) + next_observations.shape[2:])
    flat = data_augment(flat, rng, config.augment_max_shift, config.augment_intensity_scale)
    return observations, flat.reshape(next_observations.shape)


def compute_losses(
    batch: TrainBatch,
    model: ModelSet,
    config: RunConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, LossReport, np.ndarray]:
    """Unroll the model over the batch and assemble the weighted loss.

    Per sample, the value and policy terms cover steps 0..L and the
    value-prefix (or reward) and consistency terms steps 1..L; their sum is
    divided by L, multiplied by the importance weight and averaged over
    the batch.

    Returns:
        (scalar loss tensor, component report, |decode(v_t) - z_t| per sample)

    Raises:
        NonFiniteError: If the loss is NaN or infinite (the message lists
            every component)
    """
    model.train()
    dtype = model.dtype
    codec = model.codec
    L = config.unroll_steps
    size = len(batch)
    observations, next_observations = _augmented(batch, config, rng)

    consistency_targets = None
    if config.use_consistency:
        flat = next_observations.reshape((size * L,) + next_observations.shape[2:])
        with no_grad():
            target_states = model.represent(flat)
        projected = model.project(target_states, with_predictor=False)
        consistency_targets = projected.data.reshape(size, L, -1)

    state = model.represent(observations)
    value_logits = model.predict_value(state)
    predicted_values = codec.decode_logits(value_logits.data)
    value_loss = cross_entropy(value_logits, codec.encode(batch.target_values[:, 0]))
    policy_loss = cross_entropy(model.predict_policy(state), batch.target_policies[:, 0])

    vp_state = model.initial_vp_state(size)
    hidden, cell, steps = Tensor(vp_state.hidden), Tensor(vp_state.cell), vp_state.steps
    prefix_loss = Tensor(np.zeros(size, dtype=dtype))
    consistency_loss = Tensor(np.zeros(size, dtype=dtype))
    prefix_targets = batch.target_value_prefixes if config.use_value_prefix else batch.target_rewards

    for i in range(L):
        if config.dynamics_grad_scale:
            state = scale_gradient(state, 0.5)
        state = model.dynamics(state, batch.actions[:, i])
        logits, hidden, cell, steps = model.value_prefix_step(state, hidden, cell, steps)
        prefix_loss = prefix_loss + cross_entropy(logits, codec.encode(prefix_targets[:, i]))
        value_loss = value_loss + cross_entropy(
            model.predict_value(state), codec.encode(batch.target_values[:, i + 1])
        )
        policy_loss = policy_loss + cross_entropy(model.predict_policy(state), batch.target_policies[:, i + 1])
        if consistency_targets is not None:
            online = model.project(state, with_predictor=True)
            similarity = negative_cosine_similarity(online, Tensor(consistency_targets[:, i]))
            consistency_loss = consistency_loss + similarity * Tensor(batch.consistency_mask[:, i].astype(dtype))

    weights = Tensor((np.asarray(batch.weights) / L).astype(dtype))
    components = {
        "value_prefix": (prefix_loss * weights).mean(),
        "policy": (policy_loss * weights).mean(),
        "value": (value_loss * weights).mean(),
        "consistency": (consistency_loss * weights).mean(),
    }
    loss = (
        components["value_prefix"]
        + components["policy"] * config.policy_loss_coeff
        + components["value"] * config.value_loss_coeff
    )
    if config.use_consistency:
        loss = loss + components["consistency"] * config.consistency_loss_coeff

    values = {name: t.item() for name, t in components.items()}
    total = loss.item()
    if not np.isfinite(total):
        detail = ", ".join(f"{name}={value}" for name, value in values.items())
        raise NonFiniteError(f"Non-finite loss {total} ({detail})")

    report = LossReport(
        total=total,
        value_prefix=values["value_prefix"],
        policy=values["policy"],
        value=values["value"],
        consistency=values["consistency"],
        weight_decay=weight_decay_term(model.named_parameters(), config.weight_decay),
    )
    value_errors = np.abs(predicted_values - batch.target_values[:, 0])
    return loss, report, value_errors


def train_step(
    batch: TrainBatch,
    model: ModelSet,
    config: RunConfig,
    step: int,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[LossReport, np.ndarray]:
    """One optimizer update on ``batch`` at learner step ``step``.

    Momentum buffers live on the parameters, so the model carries the whole
    optimizer state. Returns the loss report (with the pre-clip gradient
    norm) and the per-sample value errors used as new priorities.
    """
    model.zero_grad()
    loss, report, value_errors = compute_losses(batch, model, config, rng)
    backward(loss)
    norm = sgd_step(
        model.named_parameters(),
        lr=config.learning_rate(step),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        grad_clip_norm=config.grad_clip_norm,
    )
    model.training_steps = step + 1
    return replace(report, grad_norm=norm), value_errors
