"""Categorical scalar codec: invertible squashing transform plus two-hot bins."""

import logging

import numpy as np

from effzero.tensorcore import NonFiniteError

logger = logging.getLogger(__name__)

TRANSFORM_EPS = 0.001


def transform(x: np.ndarray) -> np.ndarray:
    """h(x) = sign(x) * (sqrt(|x| + 1) - 1) + eps * x."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + TRANSFORM_EPS * x


def inverse_transform(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    eps = TRANSFORM_EPS
    root = (np.sqrt(1.0 + 4.0 * eps * (np.abs(y) + 1.0 + eps)) - 1.0) / (2.0 * eps)
    return np.sign(y) * (root * root - 1.0)


class ScalarCodec:
    """Maps scalars to distributions over ``bins`` points spanning [-S, S] in h-space."""

    def __init__(self, support_size: float, bins: int):
        if bins < 3 or bins % 2 == 0:
            raise ValueError(f"bins must be odd and >= 3, got {bins}")
        self.support_size = float(support_size)
        self.bins = bins
        self.support = np.linspace(-self.support_size, self.support_size, bins)
        self.spacing = 2.0 * self.support_size / (bins - 1)

    def saturation_count(self, x: np.ndarray) -> int:
        """How many values fall outside the support and would be clamped."""
        return int(np.sum(np.abs(transform(x)) > self.support_size))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Two-hot targets, shape ``x.shape + (bins,)``; out-of-range values are clamped.

        Raises:
            NonFiniteError: If any value is NaN or infinite
        """
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("Cannot encode non-finite scalar targets")
        y = np.clip(transform(x), -self.support_size, self.support_size)
        position = (y + self.support_size) / self.spacing
        lower = np.minimum(np.floor(position), self.bins - 2).astype(np.int64)
        upper_weight = position - lower
        flat_lower = lower.reshape(-1)
        flat_upper_weight = upper_weight.reshape(-1)
        out = np.zeros((flat_lower.size, self.bins))
        rows = np.arange(flat_lower.size)
        out[rows, flat_lower] = 1.0 - flat_upper_weight
        out[rows, flat_lower + 1] += flat_upper_weight
        return out.reshape(x.shape + (self.bins,))

    def decode(self, probs: np.ndarray) -> np.ndarray:
        """Expectation over bins, then the inverse transform."""
        return inverse_transform(np.asarray(probs, dtype=np.float64) @ self.support)

    def decode_logits(self, logits: np.ndarray) -> np.ndarray:
        logits = np.asarray(logits, dtype=np.float64)
        shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return self.decode(shifted / shifted.sum(axis=-1, keepdims=True))
