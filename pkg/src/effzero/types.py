"""Type definitions for effzero."""

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np


class WorkerState(Enum):
    """Pipeline worker lifecycle states."""

    INITIALIZING = "initializing"
    READY = "ready"
    RUNNING = "running"
    STOPPING = "stopping"
    STOPPED = "stopped"
    ERROR = "error"


class NoiseMode(Enum):
    """Which root-noise regime a search runs under."""

    TRAIN = "train"
    REANALYZE = "reanalyze"
    EVAL = "eval"


class PipelineMode(Enum):
    """Scheduling of actors, target workers and the learner."""

    PARALLEL = "parallel"
    SERIAL = "serial"


@dataclass
class WorkerHealth:
    """Worker health status."""

    healthy: bool
    state: WorkerState
    last_heartbeat: datetime
    queue_size: int
    error_count: int
    metadata: Dict[str, Any]


@dataclass
class StepResult:
    """Outcome of one environment step."""

    observation: np.ndarray
    reward: float
    done: bool


@dataclass
class SearchResult:
    """Root statistics of one finished search.

    Attributes:
        visit_counts: N(root, a) for every action
        policy: visit distribution at temperature 1
        root_value: mean backed-up value at the root
        action: action chosen for acting (sampled or greedy)
        tree: the finished tree, kept only when requested
    """

    visit_counts: np.ndarray
    policy: np.ndarray
    root_value: float
    action: int
    tree: Optional[Any] = None


@dataclass
class LossReport:
    """Per-step loss components.

    ``total`` equals ``value_prefix + policy_coeff * policy + value_coeff * value
    + consistency_coeff * consistency``; the weight-decay term is reported
    separately because the optimizer applies it.
    """

    total: float
    value_prefix: float
    policy: float
    value: float
    consistency: float
    weight_decay: float
    grad_norm: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "value_prefix": self.value_prefix,
            "policy": self.policy,
            "value": self.value,
            "consistency": self.consistency,
            "weight_decay": self.weight_decay,
            "grad_norm": self.grad_norm,
        }


@dataclass
class EvalReport:
    """Returns collected by ``evaluate``."""

    returns: List[float]
    mean: float
    median: float
    normalized: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
