"""Multi-seed experiments: learning sweeps, ablation tables and the staleness study.

Every run goes through ``run_training`` in its own directory, so each result
can be re-evaluated or plotted later with the other subcommands.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from effzero.config import RunConfig
from effzero.model import ModelSet
from effzero.pipeline import run_training
from effzero.reanalyze import measure_value_error
from effzero.replay import ReplayBuffer

logger = logging.getLogger("effzero.experiments")

FULL = "full"

# The three components whose removal the ablation table compares.
DEFAULT_ABLATIONS: Dict[str, str] = {
    "consistency": "use_consistency",
    "value-prefix": "use_value_prefix",
    "off-policy-correction": "use_off_policy_correction",
}


@dataclass
class SeedSweep:
    """Final mean evaluation return of one configuration, per seed."""

    label: str
    env_name: str
    returns: Dict[int, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.returns.values()))) if self.returns else float("nan")

    def reached(self, threshold: float) -> int:
        """Seeds whose return is at least ``threshold``."""
        return sum(1 for r in self.returns.values() if r >= threshold)

    def solved(self) -> int:
        """Seeds with a positive return."""
        return sum(1 for r in self.returns.values() if r > 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "env_name": self.env_name,
            "returns": {str(s): r for s, r in self.returns.items()},
            "mean": self.mean,
        }


def with_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """A validated copy of ``config`` with some fields replaced."""
    data = config.to_dict()
    data.update(overrides)
    return RunConfig.from_dict(data)


def sweep_seeds(
    config: RunConfig, seeds: Sequence[int], out_dir: Union[str, Path], label: str = FULL
) -> SeedSweep:
    """Train and evaluate ``config`` once per seed."""
    sweep = SeedSweep(label, config.env_name)
    for seed in seeds:
        run_dir = Path(out_dir) / f"{label}-{config.env_name}-seed{seed}"
        result = run_training(with_overrides(config, seed=seed), run_dir)
        sweep.returns[seed] = result.evaluation.mean
        logger.info(f"{label} on {config.env_name} seed {seed}: mean return {result.evaluation.mean:.3f}")
    return sweep


@dataclass
class AblationTable:
    """Sweeps per variant, one per environment, compared on the pooled returns."""

    sweeps: Dict[str, List[SeedSweep]] = field(default_factory=dict)

    def aggregate(self, variant: str) -> float:
        returns = [r for sweep in self.sweeps[variant] for r in sweep.returns.values()]
        return float(np.mean(returns))

    def drops(self) -> Dict[str, float]:
        """Full-agent aggregate minus each ablation's aggregate."""
        full = self.aggregate(FULL)
        return {v: full - self.aggregate(v) for v in self.sweeps if v != FULL}

    def full_dominates(self) -> bool:
        return all(drop >= 0.0 for drop in self.drops().values())

    def largest_drop(self) -> Optional[str]:
        drops = self.drops()
        return max(drops, key=drops.__getitem__) if drops else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "aggregate": {v: self.aggregate(v) for v in self.sweeps},
            "drops": self.drops(),
            "full_dominates": self.full_dominates(),
            "largest_drop": self.largest_drop(),
            "sweeps": {v: [s.to_dict() for s in sweeps] for v, sweeps in self.sweeps.items()},
        }


def run_ablations(
    configs: Sequence[RunConfig],
    seeds: Sequence[int],
    out_dir: Union[str, Path],
    switches: Mapping[str, str] = DEFAULT_ABLATIONS,
) -> AblationTable:
    """The full agent and each single-switch ablation on every environment and seed."""
    table = AblationTable()
    variants: Dict[str, Dict[str, Any]] = {FULL: {}}
    variants.update({f"no-{name}": {flag: False} for name, flag in switches.items()})
    for label, overrides in variants.items():
        table.sweeps[label] = [
            sweep_seeds(with_overrides(config, **overrides), seeds, out_dir, label) for config in configs
        ]
    logger.info(f"Ablation drops: {table.drops()}")
    return table


def compare_corrections(
    replay: ReplayBuffer,
    model: ModelSet,
    rollouts: int = 1000,
    samples: int = 64,
    stages: int = 4,
    seed: int = 0,
    step: Optional[int] = None,
) -> List[Dict[str, Any]]:
    """Value-target error without, then with, off-policy correction on the same samples."""
    reports = []
    for correction in (False, True):
        reports.append(
            measure_value_error(
                replay,
                model,
                model.config,
                correction,
                np.random.default_rng(seed),
                step=step,
                rollouts=rollouts,
                max_samples=samples,
                stages=stages,
            )
        )
    return reports


def correction_helps(reports: Sequence[Dict[str, Any]]) -> bool:
    """Whether the corrected targets are at least as close to the Monte-Carlo values."""
    by_flag = {r["correction"]: r["all"] for r in reports}
    return by_flag[True] <= by_flag[False]


def freshness_helps(report: Dict[str, Any]) -> bool:
    """Whether the freshest stage's error is no larger than the stalest stage's."""
    stages = report["by_stage"]
    return stages[-1]["error"] <= stages[0]["error"]


def staleness_study(
    config: RunConfig,
    out_dir: Union[str, Path],
    rollouts: int = 1000,
    samples: int = 64,
    stages: int = 4,
    seed: int = 0,
) -> List[Dict[str, Any]]:
    """Train once, then score the value targets over the whole, increasingly stale, replay.

    The replay must hold every collected transition for the oldest stage to
    be as stale as the run allows, so ``capacity`` should cover the budget.
    """
    if config.capacity < config.env_steps_budget:
        logger.warning(
            f"capacity={config.capacity} is below env_steps_budget={config.env_steps_budget}; "
            "the oldest data will have been evicted"
        )
    result = run_training(config, out_dir, final_evaluation=False)
    model, _ = ModelSet.load(result.checkpoint)
    replay = ReplayBuffer.load(Path(out_dir) / "replay_final.ezck")
    return compare_corrections(replay, model, rollouts=rollouts, samples=samples, stages=stages, seed=seed)
