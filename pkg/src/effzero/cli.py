"""Command-line entry points: train, eval, ablate, value-error, experiment, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from pydantic import ValidationError

from effzero.checkpoint import CheckpointError
from effzero.config import PROFILES, ConfigError, RunConfig, load_config
from effzero.decorators import available_envs
from effzero.experiments import (
    DEFAULT_ABLATIONS,
    compare_corrections,
    correction_helps,
    freshness_helps,
    run_ablations,
    staleness_study,
    sweep_seeds,
)
from effzero.metrics import export_csv, plot_runs, read_metrics
from effzero.model import ModelSet
from effzero.pipeline import PipelineError, evaluate, observation_spec, run_training
from effzero.replay import ReplayBuffer

logger = logging.getLogger("effzero")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

ABLATION_SWITCHES: Dict[str, str] = {
    "consistency": "use_consistency",
    "value-prefix": "use_value_prefix",
    "off-policy-correction": "use_off_policy_correction",
    "augmentation": "use_data_augmentation",
    "dynamic-horizon": "dynamic_horizon",
    "mcts-root-value": "mcts_root_value",
}


class UsageError(Exception):
    """Bad command line or configuration; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(level: str) -> None:
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(level)


def _parse_assignments(items: Sequence[str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(value)
    return overrides


def build_config(args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Profile or file, then EFFZERO_* variables, then command-line overrides."""
    if args.config:
        base = load_config(args.config, profile=args.profile)
    else:
        base = RunConfig.from_env(dict(PROFILES[args.profile or "paper"]))
    data = base.to_dict()
    if args.env:
        data["env_name"] = args.env
    if args.seed is not None:
        data["seed"] = args.seed
    if args.mode:
        data["pipeline_mode"] = args.mode
    data.update(_parse_assignments(args.set))
    data.update(extra or {})
    config = RunConfig.from_dict(data)
    # Fails with the list of registered environments before any work starts.
    observation_spec(config)
    return config


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="base profile (default paper)")
    parser.add_argument("--env", help=f"environment ({', '.join(available_envs())})")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=["serial", "parallel"], help="pipeline schedule")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    parser.add_argument("--out", type=Path, help="run directory")
    parser.add_argument("--no-eval", action="store_true", help="skip the final evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="effzero", description="Desk-scale EfficientZero")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", help="train an agent")
    _add_run_arguments(train)

    ablate = sub.add_parser("ablate", help="train with components disabled")
    _add_run_arguments(ablate)
    ablate.add_argument(
        "--disable",
        action="append",
        default=[],
        choices=sorted(ABLATION_SWITCHES),
        help="component to turn off, repeatable",
    )

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--env", help="environment (defaults to the checkpoint's)")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--sample", action="store_true", help="sample pi instead of argmax visits")
    ev.add_argument(
        "--reference", nargs=2, type=float, metavar=("RANDOM", "REFERENCE"), help="scores for normalization"
    )
    ev.add_argument("--out", type=Path, help="directory for eval.json")

    value_error = sub.add_parser("value-error", help="value-target error against Monte-Carlo returns")
    value_error.add_argument("--checkpoint", type=Path, required=True)
    value_error.add_argument("--replay", type=Path, required=True, help="replay snapshot")
    value_error.add_argument("--rollouts", type=int, default=1000)
    value_error.add_argument("--samples", type=int, default=64)
    value_error.add_argument("--stages", type=int, default=4)
    value_error.add_argument("--step", type=int, help="learner step the targets are computed at")
    value_error.add_argument("--seed", type=int, default=0)
    value_error.add_argument("--out", type=Path, help="directory for value_error.json")

    experiment = sub.add_parser("experiment", help="multi-seed learning, ablation and staleness studies")
    experiment.add_argument("kind", choices=["learn", "ablation", "staleness"])
    experiment.add_argument("--config", type=Path, help="YAML config file")
    experiment.add_argument("--profile", choices=sorted(PROFILES), default="toy", help="base profile (default toy)")
    experiment.add_argument(
        "--env", dest="envs", action="append", help="environment, repeatable (ablation default catcher and deepsea)"
    )
    experiment.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    experiment.add_argument("--mode", choices=["serial", "parallel"], help="pipeline schedule")
    experiment.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    experiment.add_argument(
        "--switch", action="append", choices=sorted(ABLATION_SWITCHES), help="ablation to compare, repeatable"
    )
    experiment.add_argument("--threshold", type=float, default=0.9, help="return a learning run should reach")
    experiment.add_argument("--rollouts", type=int, default=1000)
    experiment.add_argument("--samples", type=int, default=64)
    experiment.add_argument("--stages", type=int, default=4)
    experiment.add_argument("--out", type=Path, default=Path("runs") / "experiment")
    experiment.set_defaults(env=None, seed=None)

    plot = sub.add_parser("plot", help="plot metrics files")
    plot.add_argument(
        "--metrics", action="append", required=True, metavar="[LABEL=]PATH", help="metrics file, repeatable"
    )
    plot.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _run_dir(args: argparse.Namespace, config: RunConfig, prefix: str) -> Path:
    if args.out:
        return args.out
    return Path("runs") / f"{prefix}-{config.env_name}-seed{config.seed}"


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    configure_logging(config.log_level)
    result = run_training(config, _run_dir(args, config, "train"), final_evaluation=not args.no_eval)
    summary = f"Finished {result.learner_steps} steps, {result.env_steps} env steps; checkpoint {result.checkpoint}"
    if result.evaluation is not None:
        summary += f"; mean return {result.evaluation.mean:.3f}"
    print(summary)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    disabled = sorted(set(args.disable))
    config = build_config(args, {ABLATION_SWITCHES[name]: False for name in disabled})
    configure_logging(config.log_level)
    logger.info(f"Ablation run without: {', '.join(disabled) or 'nothing'}")
    label = "ablate-" + ("-".join(disabled) if disabled else "none")
    result = run_training(config, _run_dir(args, config, label), final_evaluation=not args.no_eval)
    print(f"Finished {result.learner_steps} steps; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.checkpoint.exists():
        raise UsageError(f"Checkpoint {args.checkpoint} does not exist")
    model, _ = ModelSet.load(args.checkpoint)
    configure_logging(model.config.log_level)
    name = args.env or model.env_name
    reference = {name: tuple(args.reference)} if args.reference else None
    report = evaluate(
        model, episodes=args.episodes, env_name=name, greedy=not args.sample, seed=args.seed, reference=reference
    )
    payload = {
        "mean": report.mean,
        "median": report.median,
        "normalized": report.normalized,
        "returns": report.returns,
        **report.metadata,
    }
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps({k: payload[k] for k in ("mean", "median", "normalized")}))
    return EXIT_OK


def cmd_value_error(args: argparse.Namespace) -> int:
    for path in (args.checkpoint, args.replay):
        if not path.exists():
            raise UsageError(f"{path} does not exist")
    model, _ = ModelSet.load(args.checkpoint)
    configure_logging(model.config.log_level)
    replay = ReplayBuffer.load(args.replay)
    reports = compare_corrections(
        replay,
        model,
        rollouts=args.rollouts,
        samples=args.samples,
        stages=args.stages,
        seed=args.seed,
        step=model.training_steps if args.step is None else args.step,
    )
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "value_error.json").write_text(json.dumps(reports, indent=2, sort_keys=True))
    for report in reports:
        state = "with" if report["correction"] else "without"
        print(
            f"{state} correction: current {report['current']:.4f} "
            f"unrolled {report['unrolled']:.4f} all {report['all']:.4f}"
        )
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    envs = args.envs or (["catcher", "deepsea"] if args.kind == "ablation" else ["catcher"])
    configs = [build_config(args, {"env_name": name, "seed": args.seeds[0]}) for name in envs]
    configure_logging(configs[0].log_level)
    args.out.mkdir(parents=True, exist_ok=True)
    payload: Dict[str, Any]
    if args.kind == "learn":
        sweeps = [sweep_seeds(config, args.seeds, args.out) for config in configs]
        payload = {"threshold": args.threshold, "sweeps": [s.to_dict() for s in sweeps]}
        for s in sweeps:
            print(
                f"{s.env_name}: mean {s.mean:.3f}; {s.reached(args.threshold)}/{len(s.returns)} seeds "
                f">= {args.threshold}; {s.solved()}/{len(s.returns)} with positive return"
            )
    elif args.kind == "ablation":
        switches = {name: ABLATION_SWITCHES[name] for name in args.switch} if args.switch else DEFAULT_ABLATIONS
        table = run_ablations(configs, args.seeds, args.out, switches)
        payload = table.to_dict()
        for variant, value in payload["aggregate"].items():
            print(f"{variant}: {value:.3f}")
        print(f"full >= every ablation: {table.full_dominates()}; largest drop: {table.largest_drop()}")
    else:
        reports = staleness_study(
            configs[0], args.out, rollouts=args.rollouts, samples=args.samples, stages=args.stages, seed=args.seeds[0]
        )
        payload = {
            "reports": reports,
            "correction_helps": correction_helps(reports),
            "freshness_helps": [freshness_helps(r) for r in reports],
        }
        for report in reports:
            state = "with" if report["correction"] else "without"
            stages = ", ".join(f"{s['error']:.4f}" for s in report["by_stage"])
            print(f"{state} correction: all {report['all']:.4f}; by age, stalest first: {stages}")
    (args.out / f"{args.kind}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    runs: Dict[str, List[Dict[str, Any]]] = {}
    args.out.mkdir(parents=True, exist_ok=True)
    for item in args.metrics:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or Path(item).stem, item
        if not Path(path).exists():
            raise UsageError(f"Metrics file {path} does not exist")
        records, malformed = read_metrics(path)
        if malformed:
            print(f"{path}: skipped {malformed} malformed lines", file=sys.stderr)
        runs[label] = records
        export_csv(records, args.out / f"{label}.csv")
    series = plot_runs(runs, args.out / "curves.svg")
    print(f"Wrote {args.out / 'curves.svg'} ({series} series)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "value-error": cmd_value_error,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.checkpoint:
            print(f"partial checkpoint: {e.checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
