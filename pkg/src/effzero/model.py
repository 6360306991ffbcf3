"""The network set: representation, dynamics, value-prefix, value, policy,
projector and predictor, plus batched inference for search and checkpoint I/O."""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from effzero.checkpoint import CheckpointError, read_container, write_container
from effzero.codec import ScalarCodec
from effzero.config import RunConfig, config_hash
from effzero.layers import MLP, BatchNorm, Conv2d, ConvResidualBlock, Linear, LSTMCell, Module
from effzero.tensorcore import ShapeError, Tensor, concat, no_grad, stop_gradient

logger = logging.getLogger(__name__)


@dataclass
class ValuePrefixState:
    """Recurrent state of the value-prefix head for a batch.

    ``steps`` counts calls since the last reset; it is stored already wrapped,
    so a state with ``steps == 0`` carries zero hidden and cell arrays.
    """

    hidden: np.ndarray
    cell: np.ndarray
    steps: np.ndarray

    @classmethod
    def zeros(cls, batch: int, size: int, dtype: Any = np.float32) -> "ValuePrefixState":
        return cls(
            hidden=np.zeros((batch, size), dtype=dtype),
            cell=np.zeros((batch, size), dtype=dtype),
            steps=np.zeros(batch, dtype=np.int64),
        )

    def take(self, index: Sequence[int]) -> "ValuePrefixState":
        index = np.asarray(index)
        return ValuePrefixState(self.hidden[index], self.cell[index], self.steps[index])

    @property
    def is_reset(self) -> np.ndarray:
        return self.steps == 0


@dataclass
class InferenceOutput:
    """Numpy results of one batched model call (decoded scalars)."""

    latent: np.ndarray
    value: np.ndarray
    value_prefix: np.ndarray
    policy_logits: np.ndarray
    vp_state: ValuePrefixState


class Representation(Module):
    """Stacked observation -> latent vector of size latent_dim."""

    def __init__(self, config: RunConfig, obs_shape: Tuple[int, int, int], rng: np.random.Generator, dtype: Any):
        channels, height, width = obs_shape
        self.kind = config.representation
        if self.kind == "conv":
            ch = config.conv_channels
            self.conv1 = Conv2d(channels, ch, rng, dtype)
            self.bn1 = BatchNorm(ch, dtype)
            self.conv2 = Conv2d(ch, ch, rng, dtype, stride=2)
            self.bn2 = BatchNorm(ch, dtype)
            self.block = ConvResidualBlock(ch, rng, dtype)
            flat = ch * ((height + 1) // 2) * ((width + 1) // 2)
            self.out = MLP([flat, config.latent_dim], rng, dtype, activate_last=True)
        else:
            self.out = MLP(
                [channels * height * width, config.latent_dim, config.latent_dim],
                rng,
                dtype,
                activate_last=True,
            )

    def forward(self, obs: Tensor) -> Tensor:
        x = obs
        if self.kind == "conv":
            x = self.bn1(self.conv1(x)).relu()
            x = self.bn2(self.conv2(x)).relu()
            x = self.block(x)
        return self.out(x.reshape(x.shape[0], -1))


class Dynamics(Module):
    """relu(block(concat(s, onehot(a))) + s): residual link around the action block."""

    def __init__(self, config: RunConfig, action_space: int, rng: np.random.Generator, dtype: Any):
        dim = config.latent_dim
        self.fc1 = Linear(dim + action_space, dim, rng, dtype)
        self.bn1 = BatchNorm(dim, dtype)
        self.fc2 = Linear(dim, dim, rng, dtype)
        self.bn2 = BatchNorm(dim, dtype)

    def forward(self, state: Tensor, action_onehot: Tensor) -> Tensor:
        x = self.bn1(self.fc1(concat([state, action_onehot], axis=1))).relu()
        x = self.bn2(self.fc2(x))
        return (x + state).relu()


class ValuePrefixHead(Module):
    def __init__(self, config: RunConfig, rng: np.random.Generator, dtype: Any):
        self.lstm = LSTMCell(config.latent_dim, config.lstm_hidden, rng, dtype)
        self.bn = BatchNorm(config.lstm_hidden, dtype)
        self.fc = MLP([config.lstm_hidden, config.head_hidden, config.support_bins], rng, dtype, zero_init_last=True)

    def forward(self, state: Tensor, hidden: Tensor, cell: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        hidden, cell = self.lstm(state, hidden, cell)
        logits = self.fc(self.bn(hidden).relu())
        return logits, hidden, cell


class ModelSet(Module):
    """Every network of the agent, built from one config.

    Args:
        config: run configuration (sizes, switches, precision)
        obs_shape: stacked observation shape (F * C, H, W)
        action_space: number of discrete actions
        seed: parameter initialization seed (defaults to ``config.seed``)
    """

    def __init__(
        self,
        config: RunConfig,
        obs_shape: Tuple[int, int, int],
        action_space: int,
        seed: Optional[int] = None,
        env_name: Optional[str] = None,
    ):
        self.config = config
        self.obs_shape = tuple(int(d) for d in obs_shape)
        self.action_space = int(action_space)
        self.env_name = env_name or config.env_name
        self.dtype = np.dtype(config.precision)
        self.codec = ScalarCodec(config.support_size, config.support_bins)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        dtype = self.dtype
        bins = config.support_bins
        dim = config.latent_dim

        self.representation = Representation(config, self.obs_shape, rng, dtype)
        self.dynamics_net = Dynamics(config, self.action_space, rng, dtype)
        if config.use_value_prefix:
            self.value_prefix_head = ValuePrefixHead(config, rng, dtype)
        else:
            self.reward_head = MLP([dim, config.head_hidden, bins], rng, dtype, zero_init_last=True)
        self.value_head = MLP([dim, config.head_hidden, bins], rng, dtype, zero_init_last=True)
        self.policy_head = MLP([dim, config.head_hidden, self.action_space], rng, dtype, zero_init_last=True)
        self.projector = MLP(
            [dim, config.projection_hidden, config.projection_hidden, config.projection_dim], rng, dtype
        )
        self.predictor = MLP([config.projection_dim, config.predictor_hidden, config.projection_dim], rng, dtype)
        self.training_steps = 0

    # --- differentiable pieces ---

    def represent(self, obs: Union[Tensor, np.ndarray]) -> Tensor:
        obs = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=self.dtype))
        if tuple(obs.shape[1:]) != self.obs_shape:
            raise ShapeError(f"Observation shape {tuple(obs.shape[1:])} does not match model {self.obs_shape}")
        return self.representation(obs)

    def action_onehot(self, actions: np.ndarray) -> Tensor:
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if np.any(actions < 0) or np.any(actions >= self.action_space):
            raise ValueError(f"Actions {actions.tolist()} out of range for action_space={self.action_space}")
        onehot = np.zeros((actions.size, self.action_space), dtype=self.dtype)
        onehot[np.arange(actions.size), actions] = 1.0
        return Tensor(onehot)

    def dynamics(self, state: Tensor, actions: np.ndarray) -> Tensor:
        return self.dynamics_net(state, self.action_onehot(actions))

    def value_prefix_step(
        self, state: Tensor, hidden: Tensor, cell: Tensor, steps: np.ndarray
    ) -> Tuple[Tensor, Tensor, Tensor, np.ndarray]:
        """One head call: logits for ``state`` and the next recurrent state.

        The returned hidden/cell are zeroed for rows whose counter reaches
        ``lstm_reset_horizon`` and the counter wraps to 0.
        """
        if not self.config.use_value_prefix:
            logits = self.reward_head(state)
            zeros = Tensor(np.zeros((state.shape[0], 1), dtype=self.dtype))
            return logits, zeros, zeros, np.zeros(state.shape[0], dtype=np.int64)
        logits, hidden, cell = self.value_prefix_head(state, hidden, cell)
        steps = np.asarray(steps) + 1
        wrap = steps >= self.config.lstm_reset_horizon
        if np.any(wrap):
            keep = Tensor((~wrap).astype(self.dtype).reshape(-1, 1))
            hidden = hidden * keep
            cell = cell * keep
            steps = np.where(wrap, 0, steps)
        return logits, hidden, cell, steps

    def predict_value_prefix(
        self, state: Tensor, vp_state: ValuePrefixState
    ) -> Tuple[Tensor, ValuePrefixState]:
        logits, hidden, cell, steps = self.value_prefix_step(
            state, Tensor(vp_state.hidden), Tensor(vp_state.cell), vp_state.steps
        )
        return logits, ValuePrefixState(hidden.data, cell.data, steps)

    def predict_value(self, state: Tensor) -> Tensor:
        return self.value_head(state)

    def predict_policy(self, state: Tensor) -> Tensor:
        return self.policy_head(state)

    def project(self, state: Tensor, with_predictor: bool) -> Tensor:
        """Online branch P2(P1(s)) or stop-gradient target branch sg(P1(s))."""
        if with_predictor:
            return self.predictor(self.projector(state))
        with no_grad():
            target = self.projector(state)
        return stop_gradient(target)

    def initial_vp_state(self, batch: int) -> ValuePrefixState:
        size = self.config.lstm_hidden if self.config.use_value_prefix else 1
        return ValuePrefixState.zeros(batch, size, self.dtype)

    # --- inference for search ---

    def initial_inference(self, observations: np.ndarray) -> InferenceOutput:
        """Root evaluation of stacked observations, eval mode, no graph."""
        self.eval()
        with no_grad():
            latent = self.represent(observations)
            value = self.codec.decode_logits(self.predict_value(latent).data)
            policy = self.predict_policy(latent).data
        batch = latent.shape[0]
        return InferenceOutput(
            latent=latent.data,
            value=value,
            value_prefix=np.zeros(batch),
            policy_logits=policy.astype(np.float64),
            vp_state=self.initial_vp_state(batch),
        )

    def recurrent_inference(
        self, latent: np.ndarray, actions: np.ndarray, vp_state: ValuePrefixState
    ) -> InferenceOutput:
        """One imagined step from ``latent`` under ``actions``.

        With the value-prefix head disabled the per-step reward is reported
        as ``value_prefix`` and every returned state is a reset state, so the
        search recovers the reward unchanged.
        """
        self.eval()
        with no_grad():
            state = self.dynamics(Tensor(np.asarray(latent, dtype=self.dtype)), actions)
            logits, next_vp = self.predict_value_prefix(state, vp_state)
            value = self.codec.decode_logits(self.predict_value(state).data)
            policy = self.predict_policy(state).data
        return InferenceOutput(
            latent=state.data,
            value=value,
            value_prefix=self.codec.decode_logits(logits.data),
            policy_logits=policy.astype(np.float64),
            vp_state=next_vp,
        )

    # --- snapshots and checkpoints ---

    def snapshot(self) -> "ModelSet":
        """Independent eval-mode copy for actors and target computation."""
        clone = copy.deepcopy(self)
        clone.eval()
        for p in clone.parameters():
            p.grad = None
        return clone

    def metadata(self, step: int) -> Dict[str, Any]:
        return {
            "env_name": self.env_name,
            "obs_shape": list(self.obs_shape),
            "action_space": self.action_space,
            "precision": self.config.precision,
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config),
            "step": int(step),
        }

    def state_entries(self, include_momentum: bool = True) -> Dict[str, np.ndarray]:
        entries: Dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            entries[f"param:{name}"] = p.data
            if include_momentum:
                entries[f"momentum:{name}"] = p.momentum_buffer
        for name, buffer in self.named_buffers():
            entries[f"buffer:{name}"] = buffer
        return entries

    def save(self, path: Union[str, Path], step: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> None:
        metadata = self.metadata(self.training_steps if step is None else step)
        metadata.update(extra or {})
        write_container(path, self.state_entries(), metadata)
        logger.info(f"Saved checkpoint {path} at step {metadata['step']}")

    def load_entries(self, entries: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing: List[str] = [n for n in params if f"param:{n}" not in entries]
        if missing:
            raise CheckpointError(f"Checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, p in params.items():
            value = entries[f"param:{name}"]
            if value.shape != p.data.shape:
                raise CheckpointError(f"Parameter {name}: checkpoint shape {value.shape} != model {p.data.shape}")
            p.data[...] = value
            momentum = entries.get(f"momentum:{name}")
            if momentum is not None:
                p.momentum_buffer[...] = momentum
        for name, buffer in buffers.items():
            value = entries.get(f"buffer:{name}")
            if value is not None:
                buffer[...] = value

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["ModelSet", Dict[str, Any]]:
        """Rebuild a model from a checkpoint written by ``save``."""
        entries, metadata = read_container(path)
        try:
            config = RunConfig.from_dict(metadata["config"])
            model = cls(
                config,
                tuple(metadata["obs_shape"]),
                metadata["action_space"],
                env_name=metadata.get("env_name"),
            )
        except KeyError as e:
            raise CheckpointError(f"Checkpoint metadata lacks {e}") from e
        model.load_entries(entries)
        model.training_steps = int(metadata.get("step", 0))
        return model, metadata
