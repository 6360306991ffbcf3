"""JSON-lines metrics stream, CSV export and SVG curves."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("total", "value_prefix", "policy", "value", "consistency")


class MetricsWriter:
    """Appends one JSON object per line; keys sorted so equal runs give equal files."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file: Optional[TextIO] = self.path.open("w")
        self.count = 0

    def write(self, record: Mapping[str, Any]) -> None:
        if self._file is None:
            raise ValueError(f"Metrics file {self.path} is closed")
        self._file.write(json.dumps(dict(record), sort_keys=True) + "\n")
        self._file.flush()
        self.count += 1

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def read_metrics(path: Union[str, Path]) -> Tuple[List[Dict[str, Any]], int]:
    """Parse a metrics file; returns (records, number of malformed lines skipped)."""
    records: List[Dict[str, Any]] = []
    malformed = 0
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            malformed += 1
            continue
        if not isinstance(record, dict):
            malformed += 1
            continue
        records.append(record)
    if malformed:
        logger.warning(f"Skipped {malformed} malformed lines in {path}")
    return records, malformed


def export_csv(records: Sequence[Mapping[str, Any]], path: Union[str, Path]) -> int:
    """One row per record over the union of keys; returns the row count."""
    columns = sorted({key for record in records for key in record})
    with Path(path).open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for record in records:
            writer.writerow({key: record.get(key, "") for key in columns})
    return len(records)


def _return_series(records: Sequence[Mapping[str, Any]]) -> Tuple[List[float], List[float], str]:
    evals = [r for r in records if r.get("kind") == "eval" and "mean" in r]
    if evals:
        return [r["step"] for r in evals], [r["mean"] for r in evals], "evaluation mean return"
    episodes = [r for r in records if r.get("kind") == "episode" and "return" in r]
    return [r["step"] for r in episodes], [r["return"] for r in episodes], "episode return"


def plot_runs(runs: Mapping[str, Sequence[Mapping[str, Any]]], path: Union[str, Path]) -> int:
    """Return-vs-step and loss-component curves, one labeled series per run.

    An empty run still produces a valid figure with labeled axes. Returns
    the number of series drawn.
    """
    fig, (ax_return, ax_loss) = plt.subplots(1, 2, figsize=(11, 4))
    ax_return.set_xlabel("learner step")
    ax_return.set_ylabel("return")
    ax_return.set_title("Return")
    ax_loss.set_xlabel("learner step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("Loss components")
    series = 0
    for label, records in runs.items():
        steps, returns, kind = _return_series(records)
        if steps:
            ax_return.plot(steps, returns, label=f"{label} ({kind})")
            series += 1
        train = [r for r in records if r.get("kind") == "train"]
        for component in LOSS_COMPONENTS:
            points = [(r["step"], r[component]) for r in train if component in r]
            if points:
                xs, ys = zip(*points)
                ax_loss.plot(xs, ys, label=f"{label} {component}")
                series += 1
    for ax in (ax_return, ax_loss):
        if ax.get_lines():
            ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
    return series
