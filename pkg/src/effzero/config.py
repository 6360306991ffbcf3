"""Run configuration: every hyperparameter of the training system in one model."""

import hashlib
import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ENV_PREFIX = "EFFZERO_"

_POWER_RE = re.compile(r"^\s*([-+0-9.eE]+)\s*(?:\^|\*\*)\s*([-+0-9.eE]+)\s*$")


class ConfigError(ValueError):
    """Raised when a configuration document cannot be parsed."""


def _parse_power(value: Any) -> Any:
    """Turn ``"0.997^4"`` style strings into floats; pass anything else through."""
    if isinstance(value, str):
        match = _POWER_RE.match(value)
        if match:
            return float(match.group(1)) ** float(match.group(2))
    return value


class RunConfig(BaseModel):
    """Configuration for one training run.

    Defaults are the Atari-scale hyperparameters; the ``toy`` profile scales
    them down to a desk-sized run (see ``PROFILES``).

    Attributes are grouped by the component they feed.
    """

    # --- Environment ---
    env_name: str = Field(default="catcher", description="Registered environment name")
    env_options: Dict[str, int] = Field(
        default_factory=dict, description="Keyword arguments for the environment"
    )
    frames_stacked: int = Field(default=4, ge=1, description="Frames stacked (F)")
    env_command: Optional[List[str]] = Field(
        default=None, description="argv of a protocol environment process; replaces env_name"
    )
    frame_skip: int = Field(default=1, ge=1, description="Protocol env frame skip")
    reward_clipping: Optional[bool] = Field(
        default=None, description="Sign-clip rewards; None uses the env default"
    )

    # --- Returns and search ---
    discount: float = Field(default=0.997**4, gt=0.0, lt=1.0, description="gamma")
    unroll_steps: int = Field(default=5, ge=1, description="l_unroll")
    td_steps: int = Field(default=5, ge=1, description="k")
    num_simulations: int = Field(default=50, ge=1, description="N_sim")
    uct_c1: float = Field(default=1.25, ge=0.0)
    uct_c2: float = Field(default=19652.0, gt=0.0)
    dirichlet_alpha: float = Field(default=0.3, gt=0.0, description="xi")
    dirichlet_frac: float = Field(default=0.25, ge=0.0, le=1.0, description="rho")
    softminmax_eps: float = Field(default=0.01, gt=0.0, description="epsilon")
    horizon_tau: float = Field(default=0.3, gt=0.0, description="tau")
    lstm_reset_horizon: int = Field(default=5, ge=1, description="zeta")
    temperature_decay_points: Tuple[float, float] = Field(default=(0.5, 0.75))
    temperature_values: Tuple[float, float] = Field(default=(0.5, 0.25))

    # --- Loss ---
    policy_loss_coeff: float = Field(default=1.0, ge=0.0, description="lambda_1")
    value_loss_coeff: float = Field(default=0.25, ge=0.0, description="lambda_2")
    consistency_loss_coeff: float = Field(default=2.0, ge=0.0, description="lambda_3")
    weight_decay: float = Field(default=1e-4, ge=0.0, description="c")
    dynamics_grad_scale: bool = Field(
        default=False, description="Halve gradients entering each unrolled dynamics step"
    )

    # --- Optimizer ---
    lr_initial: float = Field(default=0.2, gt=0.0)
    lr_decayed: float = Field(default=0.02, gt=0.0)
    lr_decay_steps: int = Field(default=100_000, ge=1)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    grad_clip_norm: float = Field(default=5.0, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    training_steps: int = Field(default=120_000, ge=1, description="T_total")

    # --- Replay ---
    env_steps_budget: int = Field(default=100_000, ge=1)
    min_replay_size: int = Field(default=2000, ge=1)
    segment_length: int = Field(default=400, ge=1)
    priority_alpha: float = Field(default=0.6, ge=0.0)
    priority_beta_start: float = Field(default=0.4, ge=0.0, le=1.0)
    priority_beta_end: float = Field(default=1.0, ge=0.0, le=1.0)
    replay_capacity: Optional[int] = Field(
        default=None, ge=1, description="Transitions kept; None means env_steps_budget"
    )

    # --- Reanalyze and snapshots ---
    reanalyze_policy_ratio: float = Field(default=0.99, ge=0.0, le=1.0)
    selfplay_model_interval: int = Field(default=100, ge=1)
    target_model_interval: int = Field(default=200, ge=1)

    # --- Value codec ---
    support_size: int = Field(default=300, gt=0, description="Half-width S")
    support_bins: int = Field(default=601, ge=3, description="Odd bin count")

    # --- Networks ---
    representation: str = Field(default="conv", description="conv or mlp")
    conv_channels: int = Field(default=64, ge=1)
    latent_dim: int = Field(default=256, ge=1)
    head_hidden: int = Field(default=32, ge=1)
    lstm_hidden: int = Field(default=512, ge=1)
    projection_hidden: int = Field(default=1024, ge=1)
    projection_dim: int = Field(default=1024, ge=1)
    predictor_hidden: int = Field(default=512, ge=1)
    precision: str = Field(default="float32", description="float32 or float64")

    # --- Augmentation ---
    augment_max_shift: int = Field(default=4, ge=0)
    augment_intensity_scale: float = Field(default=0.05, ge=0.0)

    # --- Ablation switches ---
    use_consistency: bool = True
    use_value_prefix: bool = True
    use_off_policy_correction: bool = True
    use_data_augmentation: bool = True
    dynamic_horizon: bool = True
    mcts_root_value: bool = True

    # --- Pipeline ---
    seed: int = Field(default=0, ge=0)
    pipeline_mode: str = Field(default="serial", description="serial or parallel")
    num_actors: int = Field(default=1, ge=1)
    envs_per_actor: int = Field(default=1, ge=1)
    num_context_workers: int = Field(default=1, ge=1)
    num_batch_workers: int = Field(default=1, ge=1)
    queue_capacity: int = Field(default=8, ge=1)
    checkpoint_interval: int = Field(default=10_000, ge=1)
    evaluation_episodes: int = Field(default=32, ge=1)
    log_level: str = Field(default="INFO", description="Python logging level")

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log_level is a valid logging level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        upper_v = v.upper()
        if upper_v not in valid_levels:
            raise ValueError(f"log_level must be one of {valid_levels}, got {v}")
        return upper_v

    @field_validator("representation")
    @classmethod
    def validate_representation(cls, v: str) -> str:
        if v not in ("conv", "mlp"):
            raise ValueError(f"representation must be 'conv' or 'mlp', got {v}")
        return v

    @field_validator("precision")
    @classmethod
    def validate_precision(cls, v: str) -> str:
        if v not in ("float32", "float64"):
            raise ValueError(f"precision must be 'float32' or 'float64', got {v}")
        return v

    @field_validator("pipeline_mode")
    @classmethod
    def validate_pipeline_mode(cls, v: str) -> str:
        if v not in ("serial", "parallel"):
            raise ValueError(f"pipeline_mode must be 'serial' or 'parallel', got {v}")
        return v

    @field_validator("support_bins")
    @classmethod
    def validate_support_bins(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"support_bins must be odd, got {v}")
        return v

    @field_validator("*", mode="before")
    @classmethod
    def parse_power_expressions(cls, v: Any) -> Any:
        return _parse_power(v)

    @model_validator(mode="after")
    def validate_schedules(self) -> "RunConfig":
        first, second = self.temperature_decay_points
        if not (0.0 < first < second < 1.0):
            raise ValueError(
                "temperature_decay_points must be strictly increasing fractions "
                f"in (0, 1), got {self.temperature_decay_points}"
            )
        if any(t <= 0 for t in self.temperature_values):
            raise ValueError(
                f"temperature_values must be positive, got {self.temperature_values}"
            )
        if self.priority_beta_end < self.priority_beta_start:
            raise ValueError("priority_beta_end must be >= priority_beta_start")
        return self

    # --- Schedules ---

    def learning_rate(self, step: int) -> float:
        """Step-decayed learning rate: multiply by lr_decayed/lr_initial every decay period."""
        factor = self.lr_decayed / self.lr_initial
        return self.lr_initial * factor ** (step // self.lr_decay_steps)

    def priority_beta(self, step: int) -> float:
        """Importance-sampling exponent, annealed linearly over training."""
        progress = min(1.0, max(0.0, step / self.training_steps))
        return self.priority_beta_start + (
            self.priority_beta_end - self.priority_beta_start
        ) * progress

    def temperature(self, step: int) -> float:
        """Visit-count temperature: 1, then the two decayed values."""
        progress = step / self.training_steps
        first, second = self.temperature_decay_points
        if progress < first:
            return 1.0
        if progress < second:
            return self.temperature_values[0]
        return self.temperature_values[1]

    @property
    def capacity(self) -> int:
        return self.replay_capacity or self.env_steps_budget

    # --- Construction and serialization ---

    @classmethod
    def from_profile(cls, name: str = "paper", **overrides: Any) -> "RunConfig":
        """Build a config from a named profile plus explicit overrides."""
        if name not in PROFILES:
            raise ConfigError(
                f"Unknown profile {name!r}; available: {sorted(PROFILES)}"
            )
        data = dict(PROFILES[name])
        data.update(overrides)
        return cls(**data)

    @classmethod
    def from_env(cls, base: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Load configuration from environment variables.

        Every field can be overridden with ``EFFZERO_<FIELD_NAME_UPPER>``; values
        are parsed as YAML scalars so ``EFFZERO_NUM_SIMULATIONS=25`` is an int.

        Args:
            base: Values the environment overrides (defaults if None)

        Returns:
            RunConfig instance
        """
        data = dict(base or {})
        data.update(env_overrides())
        return cls(**data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Create RunConfig from dictionary.

        Raises:
            pydantic.ValidationError: If data is invalid
        """
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        """Convert RunConfig to a plain dictionary (tuples become lists)."""
        data = self.model_dump()
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    def get_log_level_int(self) -> int:
        """Get log level as Python logging constant."""
        return getattr(logging, self.log_level)

    model_config = ConfigDict(
        frozen=True,  # Immutable after creation
        extra="forbid",  # Reject unknown fields
    )


# Desk-scale run: minutes on a laptop CPU instead of GPU-days.
TOY_OVERRIDES: Dict[str, Any] = {
    "training_steps": 20_000,
    "env_steps_budget": 20_000,
    "batch_size": 64,
    "num_simulations": 25,
    "segment_length": 50,
    "support_size": 20,
    "support_bins": 41,
    "latent_dim": 64,
    "lr_initial": 0.02,
    "lr_decayed": 0.002,
    # 100k of 120k steps, scaled to the shorter run
    "lr_decay_steps": 16_667,
    "min_replay_size": 200,
    "conv_channels": 16,
    "lstm_hidden": 64,
    "projection_hidden": 128,
    "projection_dim": 128,
    "predictor_hidden": 64,
    "augment_max_shift": 1,
    "checkpoint_interval": 5_000,
}

PROFILES: Dict[str, Dict[str, Any]] = {
    "paper": {},
    "toy": TOY_OVERRIDES,
}


def env_overrides() -> Dict[str, Any]:
    """Collect ``EFFZERO_*`` overrides for known fields."""
    overrides: Dict[str, Any] = {}
    for name in RunConfig.model_fields:
        raw = os.getenv(ENV_PREFIX + name.upper())
        if raw is None:
            continue
        try:
            overrides[name] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {ENV_PREFIX}{name.upper()}={raw!r}: {e}")
    return overrides


def load_config(
    path: Union[str, Path], profile: Optional[str] = None, use_env: bool = True
) -> RunConfig:
    """Load a YAML key-value file into a validated RunConfig.

    Unspecified keys fall back to the selected profile (``paper`` unless the
    file or ``profile`` argument says otherwise).

    Raises:
        ConfigError: If the document is not a parseable mapping
        pydantic.ValidationError: If a value violates an invariant
    """
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse config file {path}: {e}") from e
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError(f"Config file {path} must contain a mapping, got {type(document).__name__}")
    file_profile = document.pop("profile", None)
    name = profile or file_profile or "paper"
    if name not in PROFILES:
        raise ConfigError(f"Unknown profile {name!r}; available: {sorted(PROFILES)}")
    data = dict(PROFILES[name])
    data.update(document)
    if use_env:
        data.update(env_overrides())
    return RunConfig(**data)


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    """Write a YAML snapshot that ``load_config`` reads back identically."""
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))


def config_hash(config: RunConfig) -> str:
    """Short stable fingerprint of every hyperparameter."""
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
