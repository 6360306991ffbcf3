"""Momentum SGD with global-norm clipping and decoupled L2 weight decay."""

import logging
from typing import Iterable, List, Tuple

import numpy as np

from effzero.layers import Parameter
from effzero.tensorcore import NonFiniteError

logger = logging.getLogger(__name__)


def global_norm(params: Iterable[Tuple[str, Parameter]]) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def weight_decay_term(params: Iterable[Tuple[str, Parameter]], weight_decay: float) -> float:
    """c * ||theta||^2 over every parameter."""
    return weight_decay * sum(float(np.sum(np.square(p.data, dtype=np.float64))) for _, p in params)


def sgd_step(
    params: Iterable[Tuple[str, Parameter]],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    grad_clip_norm: float = float("inf"),
) -> float:
    """Apply one update in place and return the gradient norm before clipping.

    The gradient is clipped to ``grad_clip_norm`` by global norm, then the
    weight-decay gradient 2*c*theta is added, then
    ``buffer = momentum * buffer + d`` and ``theta -= lr * buffer``.
    Parameters without a gradient are treated as having a zero gradient.

    Raises:
        NonFiniteError: If any gradient is NaN or infinite (names the parameter)
    """
    named: List[Tuple[str, Parameter]] = list(params)
    for name, p in named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"Non-finite gradient in parameter {name}")

    norm = global_norm(named)
    scale = grad_clip_norm / norm if norm > grad_clip_norm else 1.0
    if scale < 1.0:
        logger.debug(f"Clipping gradient norm {norm:.4f} to {grad_clip_norm}")

    for _, p in named:
        direction = np.zeros_like(p.data) if p.grad is None else p.grad * scale
        if weight_decay:
            direction = direction + 2.0 * weight_decay * p.data
        p.momentum_buffer *= momentum
        p.momentum_buffer += direction.astype(p.data.dtype)
        p.data -= lr * p.momentum_buffer
    return norm
