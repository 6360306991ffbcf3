"""Batched Monte-Carlo tree search over a learned model.

Trees for every root in a batch advance in lockstep: each simulation
descends all trees, then evaluates every new leaf with one batched
``recurrent_inference`` call.

Per-edge rewards are recovered from the value-prefix head by differencing:
``r = vp(child) - vp(parent)``, or ``r = vp(child)`` when the parent is a
reset state. Values are normalized with soft min-max statistics and
unvisited children score with the mean-Q estimate of their parent.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from effzero.config import RunConfig
from effzero.model import InferenceOutput, ValuePrefixState
from effzero.tensorcore import NonFiniteError
from effzero.types import NoiseMode, SearchResult

logger = logging.getLogger(__name__)


class SearchModel(Protocol):
    """What the search needs from a model (learned or exact)."""

    action_space: int

    def recurrent_inference(
        self, latent: np.ndarray, actions: np.ndarray, vp_state: ValuePrefixState
    ) -> InferenceOutput:
        ...


class MinMaxStats:
    """Running min/max of Q over a tree with an epsilon floor on the range."""

    def __init__(self, eps: float = 0.01):
        self.eps = eps
        self.minimum = float("inf")
        self.maximum = float("-inf")

    def update(self, value: float) -> None:
        self.minimum = min(self.minimum, value)
        self.maximum = max(self.maximum, value)

    @property
    def observed(self) -> bool:
        return self.maximum >= self.minimum

    def normalize(self, value: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        if not self.observed:
            return np.zeros_like(value) if isinstance(value, np.ndarray) else 0.0
        return (value - self.minimum) / max(self.maximum - self.minimum, self.eps)


def mean_q_value(normalized_q: np.ndarray, visit_counts: np.ndarray, parent_mean_q: float) -> float:
    """(parent mean-Q + sum of visited children's normalized Q) / (1 + visited count)."""
    visited = visit_counts > 0
    return float((parent_mean_q + normalized_q[visited].sum()) / (1 + visited.sum()))


def uct_scores(
    priors: np.ndarray,
    visit_counts: np.ndarray,
    normalized_q: np.ndarray,
    c1: float,
    c2: float,
    parent_mean_q: float = 0.0,
) -> Tuple[np.ndarray, float]:
    """Scores of every child and the mean-Q used for the unvisited ones.

    ``normalized_q`` entries of unvisited children are ignored.
    """
    priors = np.asarray(priors, dtype=np.float64)
    visit_counts = np.asarray(visit_counts)
    normalized_q = np.asarray(normalized_q, dtype=np.float64)
    mean_q = mean_q_value(normalized_q, visit_counts, parent_mean_q)
    total = visit_counts.sum()
    exploration = (
        priors * np.sqrt(total) / (1.0 + visit_counts) * (c1 + np.log((total + c2 + 1.0) / c2))
    )
    q = np.where(visit_counts > 0, normalized_q, mean_q)
    return q + exploration, mean_q


def uct_select(
    priors: np.ndarray,
    visit_counts: np.ndarray,
    normalized_q: np.ndarray,
    c1: float,
    c2: float,
    parent_mean_q: float = 0.0,
) -> int:
    """Argmax of the UCT score; ties go to the lowest action index."""
    scores, _ = uct_scores(priors, visit_counts, normalized_q, c1, c2, parent_mean_q)
    return int(np.argmax(scores))


def mix_dirichlet(priors: np.ndarray, noise: np.ndarray, fraction: float) -> np.ndarray:
    """(1 - rho) * P + rho * noise."""
    return (1.0 - fraction) * np.asarray(priors) + fraction * np.asarray(noise)


def visit_policy(visit_counts: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """N^(1/T) / sum N^(1/T)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    counts = np.asarray(visit_counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("visit_policy needs at least one visit")
    scaled = counts / counts.max()
    powered = scaled ** (1.0 / temperature)
    return powered / powered.sum()


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


class SearchTree:
    """Flat arena of nodes for one root; node 0 is the root."""

    def __init__(self, action_space: int, discount: float, eps: float):
        self.action_space = action_space
        self.discount = discount
        self.minmax = MinMaxStats(eps)
        self.children: List[np.ndarray] = []
        self.priors: List[np.ndarray] = []
        self.visit_count: List[int] = []
        self.value_sum: List[float] = []
        self.value_prefix: List[float] = []
        self.reset: List[bool] = []
        self.latent: List[np.ndarray] = []
        self.hidden: List[np.ndarray] = []
        self.cell: List[np.ndarray] = []
        self.steps: List[int] = []

    def add_node(
        self,
        priors: np.ndarray,
        value_prefix: float,
        latent: np.ndarray,
        hidden: np.ndarray,
        cell: np.ndarray,
        steps: int,
    ) -> int:
        self.children.append(np.full(self.action_space, -1, dtype=np.int64))
        self.priors.append(np.asarray(priors, dtype=np.float64))
        self.visit_count.append(0)
        self.value_sum.append(0.0)
        self.value_prefix.append(float(value_prefix))
        self.reset.append(int(steps) == 0)
        self.latent.append(latent)
        self.hidden.append(hidden)
        self.cell.append(cell)
        self.steps.append(int(steps))
        return len(self.children) - 1

    def __len__(self) -> int:
        return len(self.children)

    def value(self, node: int) -> float:
        count = self.visit_count[node]
        return self.value_sum[node] / count if count else 0.0

    def edge_reward(self, parent: int, child: int) -> float:
        if self.reset[parent]:
            return self.value_prefix[child]
        return self.value_prefix[child] - self.value_prefix[parent]

    def child_stats(self, node: int) -> Tuple[np.ndarray, np.ndarray]:
        """Visit counts and raw Q(s, a) of every child (0 for missing ones)."""
        counts = np.zeros(self.action_space, dtype=np.int64)
        q = np.zeros(self.action_space)
        for action, child in enumerate(self.children[node]):
            if child >= 0 and self.visit_count[child] > 0:
                counts[action] = self.visit_count[child]
                q[action] = self.edge_reward(node, child) + self.discount * self.value(child)
        return counts, q

    def select_child(self, node: int, c1: float, c2: float, parent_mean_q: float) -> Tuple[int, float]:
        counts, q = self.child_stats(node)
        normalized = np.asarray(self.minmax.normalize(q), dtype=np.float64)
        scores, mean_q = uct_scores(self.priors[node], counts, normalized, c1, c2, parent_mean_q)
        return int(np.argmax(scores)), mean_q

    def backup(self, path: Sequence[int], leaf_value: float) -> None:
        """Propagate ``leaf_value`` from the last node of ``path`` up to the root."""
        bootstrap = leaf_value
        for depth in range(len(path) - 1, -1, -1):
            node = path[depth]
            self.value_sum[node] += bootstrap
            self.visit_count[node] += 1
            if depth == 0:
                break
            reward = self.edge_reward(path[depth - 1], node)
            self.minmax.update(reward + self.discount * self.value(node))
            bootstrap = reward + self.discount * bootstrap

    def root_visit_counts(self) -> np.ndarray:
        return self.child_stats(0)[0]

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready view of the finished tree: N, Q, priors and children per node."""
        nodes = []
        for node in range(len(self)):
            counts, q = self.child_stats(node)
            nodes.append(
                {
                    "id": node,
                    "visits": self.visit_count[node],
                    "value": self.value(node),
                    "value_prefix": self.value_prefix[node],
                    "reset": self.reset[node],
                    "priors": self.priors[node].tolist(),
                    "children": self.children[node].tolist(),
                    "child_visits": counts.tolist(),
                    "child_q": q.tolist(),
                }
            )
        return {
            "minmax": [self.minmax.minimum, self.minmax.maximum] if self.minmax.observed else None,
            "nodes": nodes,
        }


def dump_tree(tree: SearchTree, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(tree.to_dict(), indent=2))


def _check_output(output: InferenceOutput, where: str) -> None:
    for name in ("latent", "value", "value_prefix", "policy_logits"):
        array = getattr(output, name)
        bad = ~np.isfinite(np.asarray(array, dtype=np.float64))
        if np.any(bad):
            rows = np.unique(np.nonzero(bad)[0]).tolist()
            raise NonFiniteError(f"Non-finite {name} from {where} in batch rows {rows[:8]}")


def run_batch(
    roots: InferenceOutput,
    model: SearchModel,
    config: RunConfig,
    noise_mode: NoiseMode,
    rng: np.random.Generator,
    temperature: float = 1.0,
    greedy: bool = False,
    keep_trees: bool = False,
    num_simulations: Optional[int] = None,
) -> List[SearchResult]:
    """Search from every root of ``roots`` with exactly N_sim simulations each.

    Args:
        roots: initial inference of the root observations
        model: anything with ``recurrent_inference``
        noise_mode: TRAIN and REANALYZE mix Dirichlet noise into root priors
        rng: source of root noise and action sampling
        temperature: visit-count temperature for the acting choice
        greedy: pick argmax visits (lowest index on ties) instead of sampling
        keep_trees: attach each finished ``SearchTree`` to its result

    Raises:
        NonFiniteError: If the model returns NaN or infinite values
    """
    _check_output(roots, "initial inference")
    simulations = config.num_simulations if num_simulations is None else num_simulations
    batch = roots.latent.shape[0]
    action_space = roots.policy_logits.shape[1]
    priors = softmax(roots.policy_logits)
    if noise_mode in (NoiseMode.TRAIN, NoiseMode.REANALYZE) and config.dirichlet_frac > 0:
        noise = rng.dirichlet([config.dirichlet_alpha] * action_space, size=batch)
        priors = mix_dirichlet(priors, noise, config.dirichlet_frac)

    trees = []
    for b in range(batch):
        tree = SearchTree(action_space, config.discount, config.softminmax_eps)
        tree.add_node(
            priors[b],
            0.0,
            roots.latent[b],
            roots.vp_state.hidden[b],
            roots.vp_state.cell[b],
            0,
        )
        trees.append(tree)

    for _ in range(simulations):
        paths: List[List[int]] = []
        leaf_actions = np.zeros(batch, dtype=np.int64)
        for b, tree in enumerate(trees):
            node, mean_q, path = 0, 0.0, [0]
            while True:
                action, mean_q = tree.select_child(node, config.uct_c1, config.uct_c2, mean_q)
                child = tree.children[node][action]
                if child < 0:
                    leaf_actions[b] = action
                    break
                node = int(child)
                path.append(node)
            paths.append(path)

        parents = [path[-1] for path in paths]
        latent = np.stack([tree.latent[p] for tree, p in zip(trees, parents)])
        vp_state = ValuePrefixState(
            hidden=np.stack([tree.hidden[p] for tree, p in zip(trees, parents)]),
            cell=np.stack([tree.cell[p] for tree, p in zip(trees, parents)]),
            steps=np.array([tree.steps[p] for tree, p in zip(trees, parents)], dtype=np.int64),
        )
        output = model.recurrent_inference(latent, leaf_actions, vp_state)
        _check_output(output, "recurrent inference")
        leaf_priors = softmax(output.policy_logits)

        for b, tree in enumerate(trees):
            leaf = tree.add_node(
                leaf_priors[b],
                output.value_prefix[b],
                output.latent[b],
                output.vp_state.hidden[b],
                output.vp_state.cell[b],
                output.vp_state.steps[b],
            )
            tree.children[parents[b]][leaf_actions[b]] = leaf
            tree.backup(paths[b] + [leaf], float(output.value[b]))

    results = []
    for tree in trees:
        counts = tree.root_visit_counts()
        if greedy:
            action = int(np.argmax(counts))
        else:
            action = int(rng.choice(action_space, p=visit_policy(counts, temperature)))
        results.append(
            SearchResult(
                visit_counts=counts,
                policy=visit_policy(counts, 1.0),
                root_value=tree.value(0),
                action=action,
                tree=tree if keep_trees else None,
            )
        )
    return results


def search(
    model: Any,
    observations: np.ndarray,
    config: RunConfig,
    noise_mode: NoiseMode,
    rng: np.random.Generator,
    **kwargs: Any,
) -> List[SearchResult]:
    """Initial inference on ``observations`` followed by ``run_batch``."""
    return run_batch(model.initial_inference(observations), model, config, noise_mode, rng, **kwargs)
