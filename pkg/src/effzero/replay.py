"""Game segments, prioritized replay and the sum tree behind it."""

import bisect
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from effzero.checkpoint import read_container, write_container

logger = logging.getLogger(__name__)

PRIORITY_FLOOR = 1e-6


@dataclass
class GameSegment:
    """A run of consecutive transitions from one episode.

    The first ``owned`` transitions belong to this segment (and are
    sampleable); up to ``l_unroll + k`` further transitions of the same
    episode follow as a read-only tail for target computation.
    ``observations`` has one more entry than ``actions``: the stacked
    observation after the last stored transition. ``terminal`` marks that
    the episode ended after the last stored transition.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    policies: np.ndarray
    root_values: np.ndarray
    collection_steps: np.ndarray
    owned: int
    terminal: bool
    env_states: Optional[List[Any]] = None
    uid: int = -1

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def validate(self, segment_length: Optional[int] = None) -> None:
        """Raise ValueError if the parallel arrays disagree."""
        n = len(self)
        checks = [
            (self.observations.shape[0] == n + 1, "observations must have len(actions) + 1 entries"),
            (self.rewards.shape[0] == n, "rewards length differs from actions"),
            (self.policies.shape[0] == n, "policies length differs from actions"),
            (self.root_values.shape[0] == n, "root_values length differs from actions"),
            (self.collection_steps.shape[0] == n, "collection_steps length differs from actions"),
            (1 <= self.owned <= n, f"owned={self.owned} must be in [1, {n}]"),
            (bool(np.all(np.diff(self.collection_steps[: self.owned]) >= 0)), "collection steps must be nondecreasing"),
            (bool(np.all(np.isfinite(self.rewards))), "rewards must be finite"),
        ]
        if segment_length is not None:
            checks.append((self.owned <= segment_length, f"owned={self.owned} exceeds segment_length={segment_length}"))
        if self.env_states is not None:
            checks.append((len(self.env_states) == n + 1, "env_states must match observations"))
        for ok, message in checks:
            if not ok:
                raise ValueError(f"Malformed segment: {message}")


@dataclass
class _Pending:
    observations: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    policies: List[np.ndarray] = field(default_factory=list)
    root_values: List[float] = field(default_factory=list)
    collection_steps: List[int] = field(default_factory=list)
    env_states: List[Any] = field(default_factory=list)


class EpisodeRecorder:
    """Cuts one environment's stream of transitions into segments.

    A segment is emitted once ``segment_length`` owned transitions plus the
    ``pad`` tail are available, or when the episode ends (``finish``) or the
    stream is cut (``flush``).
    """

    def __init__(self, segment_length: int, pad: int, keep_env_states: bool = True):
        self.segment_length = segment_length
        self.pad = pad
        self.keep_env_states = keep_env_states
        self._pending = _Pending()

    def start(self, observation: np.ndarray, env_state: Any = None) -> None:
        self._pending = _Pending(observations=[observation], env_states=[env_state])

    def record(
        self,
        action: int,
        reward: float,
        policy: np.ndarray,
        root_value: float,
        collection_step: int,
        next_observation: np.ndarray,
        next_env_state: Any = None,
    ) -> List[GameSegment]:
        p = self._pending
        p.actions.append(int(action))
        p.rewards.append(float(reward))
        p.policies.append(np.asarray(policy, dtype=np.float64))
        p.root_values.append(float(root_value))
        p.collection_steps.append(int(collection_step))
        p.observations.append(next_observation)
        p.env_states.append(next_env_state)
        segments = []
        while len(p.actions) >= self.segment_length + self.pad:
            segments.append(self._cut(self.segment_length, terminal=False))
        return segments

    def finish(self) -> List[GameSegment]:
        """The episode ended after the last recorded transition."""
        return self._drain(terminal=True)

    def flush(self) -> List[GameSegment]:
        """Emit what is pending without marking an episode end."""
        return self._drain(terminal=False)

    def _drain(self, terminal: bool) -> List[GameSegment]:
        segments = []
        while self._pending.actions:
            owned = min(self.segment_length, len(self._pending.actions))
            segments.append(self._cut(owned, terminal=terminal))
        return segments

    def _cut(self, owned: int, terminal: bool) -> GameSegment:
        p = self._pending
        stored = min(len(p.actions), owned + self.pad)
        reaches_end = stored == len(p.actions)
        segment = GameSegment(
            observations=np.stack(p.observations[: stored + 1]),
            actions=np.asarray(p.actions[:stored], dtype=np.int64),
            rewards=np.asarray(p.rewards[:stored], dtype=np.float64),
            policies=np.stack(p.policies[:stored]),
            root_values=np.asarray(p.root_values[:stored], dtype=np.float64),
            collection_steps=np.asarray(p.collection_steps[:stored], dtype=np.int64),
            owned=owned,
            terminal=terminal and reaches_end,
            env_states=list(p.env_states[: stored + 1]) if self.keep_env_states else None,
        )
        self._pending = _Pending(
            observations=p.observations[owned:],
            actions=p.actions[owned:],
            rewards=p.rewards[owned:],
            policies=p.policies[owned:],
            root_values=p.root_values[owned:],
            collection_steps=p.collection_steps[owned:],
            env_states=p.env_states[owned:],
        )
        return segment


class SumTree:
    """Binary sum tree over ``capacity`` leaves with vectorized update and search."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.size = 1
        while self.size < capacity:
            self.size *= 2
        self.tree = np.zeros(2 * self.size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def get(self, slots: np.ndarray) -> np.ndarray:
        return self.tree[np.asarray(slots) + self.size]

    def set(self, slots: np.ndarray, values: np.ndarray) -> None:
        nodes = np.asarray(slots, dtype=np.int64) + self.size
        self.tree[nodes] = values
        nodes = np.unique(nodes // 2)
        while nodes.size and nodes[0] >= 1:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            nodes = np.unique(nodes // 2)

    def find(self, prefix: np.ndarray) -> np.ndarray:
        """Leaf slot whose cumulative range contains each prefix value."""
        prefix = np.array(prefix, dtype=np.float64)
        nodes = np.ones(prefix.shape, dtype=np.int64)
        if prefix.size == 0:
            return nodes
        while nodes[0] < self.size:
            left = self.tree[2 * nodes]
            go_right = prefix >= left
            # never step into an empty right subtree because of rounding
            go_right &= self.tree[2 * nodes + 1] > 0
            prefix = np.where(go_right, prefix - left, prefix)
            nodes = 2 * nodes + go_right
        return nodes - self.size


class ReplayBuffer:
    """Segment store with proportional prioritized sampling.

    Transitions are addressed by a global index that only grows. Slots in
    the sum tree are ``index % capacity``; whole segments are evicted
    oldest-first so live indices always occupy a contiguous circular range.
    All public methods serialize on one lock.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, min_size: int = 1):
        self.capacity = capacity
        self.alpha = alpha
        self.min_size = min_size
        self._tree = SumTree(capacity)
        self._priorities = np.zeros(capacity)
        self._segments: List[GameSegment] = []
        self._starts: List[int] = []
        self._first_index = 0
        self._next_index = 0
        self._next_uid = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._next_index - self._first_index

    @property
    def num_segments(self) -> int:
        return len(self._segments)

    @property
    def total_appended(self) -> int:
        return self._next_index

    def max_priority(self) -> float:
        if len(self) == 0:
            return 1.0
        return float(self._priorities.max())

    def _slots(self, indices: np.ndarray) -> np.ndarray:
        return np.asarray(indices, dtype=np.int64) % self.capacity

    def append(self, segment: GameSegment) -> int:
        """Store a segment; its owned transitions get the current max priority.

        Returns the global index of the segment's first transition.
        """
        segment.validate()
        if segment.owned > self.capacity:
            raise ValueError(f"Segment owns {segment.owned} transitions; capacity is {self.capacity}")
        with self._lock:
            priority = self.max_priority()
            while len(self) + segment.owned > self.capacity:
                self._evict_oldest()
            start = self._next_index
            segment.uid = self._next_uid
            self._next_uid += 1
            self._segments.append(segment)
            self._starts.append(start)
            self._next_index += segment.owned
            slots = self._slots(np.arange(start, self._next_index))
            self._priorities[slots] = priority
            self._tree.set(slots, np.full(slots.size, priority**self.alpha))
            return start

    def _evict_oldest(self) -> None:
        segment = self._segments.pop(0)
        start = self._starts.pop(0)
        slots = self._slots(np.arange(start, start + segment.owned))
        self._priorities[slots] = 0.0
        self._tree.set(slots, np.zeros(slots.size))
        self._first_index = start + segment.owned
        logger.debug(f"Evicted segment {segment.uid} ({segment.owned} transitions)")

    def _rebuild(self, alpha: float) -> None:
        self.alpha = alpha
        live = self._slots(np.arange(self._first_index, self._next_index))
        self._tree = SumTree(self.capacity)
        if live.size:
            self._tree.set(live, self._priorities[live] ** alpha)

    def sample(
        self,
        batch_size: int,
        beta: float,
        rng: np.random.Generator,
        alpha: Optional[float] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Draw ``batch_size`` global indices with P(i) = p_i^a / sum_k p_k^a.

        Returns the indices and importance weights (N * P(i))^-beta divided
        by the largest weight in the batch.

        Raises:
            ValueError: If the buffer holds fewer than ``min_size`` transitions
        """
        with self._lock:
            size = len(self)
            if size < max(self.min_size, 1):
                raise ValueError(f"Replay buffer holds {size} transitions; need at least {self.min_size}")
            if alpha is not None and alpha != self.alpha:
                self._rebuild(alpha)
            total = self._tree.total
            slots = self._tree.find(rng.random(batch_size) * total)
            probabilities = self._tree.get(slots) / total
            weights = (size * probabilities) ** (-beta)
            weights = weights / weights.max()
            indices = self._first_index + (slots - self._first_index) % self.capacity
            return indices.astype(np.int64), weights

    def probabilities(self) -> np.ndarray:
        """P(i) for every live transition, in global index order."""
        with self._lock:
            live = self._slots(np.arange(self._first_index, self._next_index))
            return self._tree.get(live) / self._tree.total

    def update_priorities(self, indices: Sequence[int], errors: Sequence[float]) -> int:
        """Set p_i = max(|error_i|, 1e-6); evicted indices are skipped.

        Returns the number of priorities updated.

        Raises:
            IndexError: If an index was never allocated
        """
        indices = np.asarray(indices, dtype=np.int64)
        errors = np.abs(np.asarray(errors, dtype=np.float64))
        with self._lock:
            bad = (indices < 0) | (indices >= self._next_index)
            if np.any(bad):
                raise IndexError(f"Replay indices out of range: {indices[bad].tolist()[:8]}")
            live = indices >= self._first_index
            if not np.all(live):
                logger.debug(f"Skipping {int((~live).sum())} priority updates for evicted transitions")
            slots = self._slots(indices[live])
            values = np.maximum(errors[live], PRIORITY_FLOOR)
            self._priorities[slots] = values
            self._tree.set(slots, values**self.alpha)
            return int(live.sum())

    def lookup(self, index: int) -> Tuple[GameSegment, int]:
        """Segment holding global ``index`` and the offset within it."""
        with self._lock:
            if not self._first_index <= index < self._next_index:
                raise IndexError(f"Replay index {index} is not live")
            position = bisect.bisect_right(self._starts, index) - 1
            return self._segments[position], index - self._starts[position]

    def segments(self) -> List[GameSegment]:
        with self._lock:
            return list(self._segments)

    # --- snapshots ---

    def save(self, path: Union[str, Path]) -> None:
        """Write every live segment and priority in the checkpoint container."""
        with self._lock:
            entries: Dict[str, np.ndarray] = {}
            segments_meta = []
            for k, (segment, start) in enumerate(zip(self._segments, self._starts)):
                for name in ("observations", "actions", "rewards", "policies", "root_values", "collection_steps"):
                    entries[f"segment:{k}:{name}"] = getattr(segment, name)
                segments_meta.append(
                    {
                        "start": start,
                        "owned": segment.owned,
                        "terminal": segment.terminal,
                        "uid": segment.uid,
                        "env_states": (
                            [list(s) if s is not None else None for s in segment.env_states]
                            if segment.env_states is not None
                            else None
                        ),
                    }
                )
            entries["priorities"] = self._priorities
            metadata = {
                "kind": "replay",
                "capacity": self.capacity,
                "alpha": self.alpha,
                "min_size": self.min_size,
                "first_index": self._first_index,
                "next_index": self._next_index,
                "next_uid": self._next_uid,
                "segments": segments_meta,
            }
        write_container(path, entries, metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReplayBuffer":
        entries, metadata = read_container(path)
        buffer = cls(metadata["capacity"], metadata["alpha"], metadata.get("min_size", 1))
        for k, meta in enumerate(metadata["segments"]):
            segment = GameSegment(
                observations=entries[f"segment:{k}:observations"],
                actions=entries[f"segment:{k}:actions"],
                rewards=entries[f"segment:{k}:rewards"],
                policies=entries[f"segment:{k}:policies"],
                root_values=entries[f"segment:{k}:root_values"],
                collection_steps=entries[f"segment:{k}:collection_steps"],
                owned=meta["owned"],
                terminal=meta["terminal"],
                env_states=(
                    [tuple(s) if s is not None else None for s in meta["env_states"]]
                    if meta["env_states"] is not None
                    else None
                ),
                uid=meta["uid"],
            )
            buffer._segments.append(segment)
            buffer._starts.append(meta["start"])
        buffer._first_index = metadata["first_index"]
        buffer._next_index = metadata["next_index"]
        buffer._next_uid = metadata["next_uid"]
        buffer._priorities = entries["priorities"].astype(np.float64)
        buffer._rebuild(buffer.alpha)
        return buffer
