"""effzero - sample-efficient model-based reinforcement learning at desk scale."""

from effzero.config import RunConfig, load_config
from effzero.decorators import environment
from effzero.env import Catcher, DeepSea, Environment
from effzero.model import ModelSet
from effzero.pipeline import evaluate, run_training
from effzero.types import NoiseMode, WorkerHealth, WorkerState

__version__ = "0.1.0"
__all__ = [
    "RunConfig",
    "load_config",
    "environment",
    "Environment",
    "Catcher",
    "DeepSea",
    "ModelSet",
    "run_training",
    "evaluate",
    "NoiseMode",
    "WorkerState",
    "WorkerHealth",
]
