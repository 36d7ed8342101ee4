"""
This module contains the reporting stage: persisting training reports,
collecting baseline/distillation pairs into comparison rows, seed
aggregation and the CSV, text and SVG outputs.
"""

import csv
import logging

from json.decoder import JSONDecodeError
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from pydantic import (
    BaseModel,
    Field,
    ValidationError,
)

from . import LAYOUT
from .distillation import TrainReport
from .exceptions import (
    ConfigurationError,
    FormatError,
)
from .templates import (
    PLOT_HEIGHT,
    PLOT_MARGIN,
    render_template,
    scale_points,
    write_template,
)
from .utils import (
    create_dirs,
    write_model_to_json,
)


LOGGER = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "loss", "train_accuracy", "test_accuracy"]

TRAIN_COLOR = "#1f77b4"
TEST_COLOR = "#d62728"


class ComparisonRow(BaseModel):
    """One baseline versus distilled student comparison."""

    dataset: str = Field(..., description="The dataset name.")
    model: str = Field(..., description="The network preset.")
    seed: int = Field(..., description="The run seed.")
    mode: str = Field(..., description="sparse-kd or default-kd")
    prune_ratio: Optional[float] = Field(
        None, description="The teacher prune ratio (sparse-KD only)."
    )
    teacher_accuracy: Optional[float] = Field(
        None, description="The sparse teacher test accuracy in percent."
    )
    baseline_accuracy: float = Field(
        ..., description="Final test accuracy of the baseline student in percent."
    )
    kd_accuracy: float = Field(
        ..., description="Final test accuracy of the distilled student in percent."
    )
    improvement: float = Field(..., description="`kd_accuracy - baseline_accuracy`")
    baseline_best_accuracy: float = Field(..., description="Best baseline test accuracy.")
    kd_best_accuracy: float = Field(..., description="Best distilled test accuracy.")
    kd_run: str = Field(..., description="The distilled run directory (relative).")

    def sort_key(self) -> Tuple[Any, ...]:
        # default-KD rows carry no ratio and follow the sparse rows of their model
        return (
            self.dataset,
            self.model,
            self.mode == "default-kd",
            self.prune_ratio or 0.0,
            self.seed,
        )


class AggregateRow(BaseModel):
    """Improvement statistics over seeds."""

    dataset: str
    model: str
    mode: str
    prune_ratio: Optional[float]
    count: int = Field(..., description="The number of seeds.")
    mean_baseline_accuracy: float
    mean_kd_accuracy: float
    mean_improvement: float
    std_improvement: float = Field(..., description="Population standard deviation.")


def write_train_report(report: TrainReport, directory: Path, record_timing: bool = False):
    """Write a training report as `report.json` and per-epoch `report.csv`.

    Wall times are left out unless `record_timing` is set, so repeated runs
    produce identical files.

    Args:
        report: The training report
        directory: The run directory
        record_timing: Include the epoch wall times
    """
    directory.mkdir(parents=True, exist_ok=True)
    exclude = None
    if not record_timing:
        exclude = {"initial": {"wall_time"}, "epochs": {"__all__": {"wall_time"}}}
    write_model_to_json(report, directory / LAYOUT.REPORT.value, exclude=exclude)

    columns = EPOCH_COLUMNS + (["wall_time"] if record_timing else [])
    with open(directory / LAYOUT.REPORT_CSV.value, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for metrics in report.history():
            values = metrics.dict()
            writer.writerow(["" if values[c] is None else values[c] for c in columns])
    LOGGER.debug("Wrote report %s to %s", report.run_id, directory)


def load_train_report(path: Path) -> TrainReport:
    """Load a `report.json`.

    Raises:
        FormatError: If the file is not a valid training report
    """
    try:
        return TrainReport.parse_file(path)
    except (ValidationError, JSONDecodeError) as e:
        raise FormatError(f"invalid training report {path}: {e}") from e


def collect_rows(run_dir: Path) -> List[ComparisonRow]:
    """Pair every distilled run below `run_dir` with the baseline next to it.

    A distilled run `<group>/<name>/report.json` is compared against
    `<group>/baseline/report.json`.

    Args:
        run_dir: The run directory

    Raises:
        FormatError: If no distilled reports exist
        ConfigurationError: If a distilled run has no baseline (names the missing file)

    Returns:
        The comparison rows sorted by dataset, model and prune ratio
    """
    report_files = sorted(run_dir.rglob(LAYOUT.REPORT.value))
    rows = []
    baselines: Dict[Path, TrainReport] = {}
    for path in report_files:
        report = load_train_report(path)
        if report.role == "baseline":
            continue
        baseline_path = path.parent.parent / LAYOUT.BASELINE.value / LAYOUT.REPORT.value
        if baseline_path not in baselines:
            if not baseline_path.exists():
                raise ConfigurationError(f"missing baseline report '{baseline_path}'")
            baselines[baseline_path] = load_train_report(baseline_path)
        baseline = baselines[baseline_path]
        rows.append(
            ComparisonRow(
                dataset=report.dataset,
                model=report.preset or "custom",
                seed=report.seed,
                mode=report.role,
                prune_ratio=report.prune_ratio,
                teacher_accuracy=report.teacher_accuracy,
                baseline_accuracy=baseline.final_test_accuracy,
                kd_accuracy=report.final_test_accuracy,
                improvement=report.final_test_accuracy - baseline.final_test_accuracy,
                baseline_best_accuracy=baseline.best_test_accuracy,
                kd_best_accuracy=report.best_test_accuracy,
                kd_run=path.parent.relative_to(run_dir).as_posix(),
            )
        )
    if not rows:
        raise FormatError(f"no distilled training reports found in '{run_dir}'")
    return sorted(rows, key=ComparisonRow.sort_key)


def aggregate(rows: Sequence[ComparisonRow]) -> List[AggregateRow]:
    """Mean and population standard deviation of the improvement over seeds.

    Args:
        rows: The comparison rows

    Returns:
        One row per (dataset, model, mode, prune ratio)
    """
    groups: Dict[Tuple[Any, ...], List[ComparisonRow]] = {}
    for row in sorted(rows, key=ComparisonRow.sort_key):
        groups.setdefault(
            (row.dataset, row.model, row.mode, row.prune_ratio), []
        ).append(row)
    aggregates = []
    for (dataset, model, mode, ratio), members in groups.items():
        improvements = np.array([r.improvement for r in members])
        aggregates.append(
            AggregateRow(
                dataset=dataset,
                model=model,
                mode=mode,
                prune_ratio=ratio,
                count=len(members),
                mean_baseline_accuracy=float(np.mean([r.baseline_accuracy for r in members])),
                mean_kd_accuracy=float(np.mean([r.kd_accuracy for r in members])),
                mean_improvement=float(np.mean(improvements)),
                std_improvement=float(np.std(improvements)),
            )
        )
    return aggregates


def _write_csv(models: Sequence[BaseModel], columns: List[str], path: Path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for model in models:
            values = model.dict()
            writer.writerow(["" if values[c] is None else values[c] for c in columns])


def _y_ticks(y_range: Tuple[float, float], steps: int = 5) -> List[Dict[str, Any]]:
    low, high = y_range
    ticks = []
    for i in range(steps + 1):
        value = low + (high - low) * i / steps
        y = PLOT_HEIGHT - PLOT_MARGIN - (PLOT_HEIGHT - 2 * PLOT_MARGIN) * i / steps
        ticks.append({"y": f"{y:.2f}", "label": f"{value:.0f}"})
    return ticks


def render_accuracy_plot(report: TrainReport, title: Optional[str] = None) -> str:
    """Render the train and test accuracy per epoch of one run as SVG.

    Args:
        report: The training report
        title: The plot title (defaults to the run id)

    Returns:
        The SVG document
    """
    history = report.history()
    x_range = (0.0, float(max(len(history) - 1, 1)))
    y_range = (0.0, 100.0)
    lines = [
        {
            "label": label,
            "color": color,
            "points": scale_points(
                [(m.epoch, getattr(m, attr)) for m in history], x_range, y_range
            ),
        }
        for label, color, attr in (
            ("train", TRAIN_COLOR, "train_accuracy"),
            ("test", TEST_COLOR, "test_accuracy"),
        )
    ]
    return render_template(
        "accuracy.svg.j2",
        {
            "title": title or report.run_id,
            "lines": lines,
            "y_ticks": _y_ticks(y_range),
            "x_label": "epoch",
        },
    )


def build_report(run_dir: Path, out_dir: Optional[Path] = None) -> List[ComparisonRow]:
    """Create the comparison table, seed aggregates and plots of a run directory.

    Writes `comparison.csv`, `comparison.txt`, `aggregate.json`,
    `aggregate.csv` and one `plots/<run>.svg` per training report.

    Args:
        run_dir: The run directory to collect reports from
        out_dir: The output directory (defaults to `run_dir`)

    Returns:
        The comparison rows
    """
    out_dir = out_dir or run_dir
    rows = collect_rows(run_dir)
    aggregates = aggregate(rows)
    plots_dir = out_dir / LAYOUT.PLOTS.value
    create_dirs([out_dir, plots_dir], always=True)

    _write_csv(rows, list(ComparisonRow.__fields__), out_dir / LAYOUT.COMPARISON_CSV.value)
    _write_csv(
        aggregates, list(AggregateRow.__fields__), out_dir / LAYOUT.AGGREGATE_CSV.value
    )
    write_model_to_json(
        _Aggregates(rows=aggregates), out_dir / LAYOUT.AGGREGATE_JSON.value
    )
    write_template(
        "comparison.txt.j2",
        out_dir / LAYOUT.COMPARISON_TXT.value,
        {"rows": rows, "aggregates": aggregates},
    )

    for path in sorted(run_dir.rglob(LAYOUT.REPORT.value)):
        run = path.parent.relative_to(run_dir).as_posix()
        name = run.replace("/", "_") if run != "." else "run"
        (plots_dir / f"{name}.svg").write_text(
            render_accuracy_plot(load_train_report(path), title=run)
        )
    LOGGER.info("Wrote %d comparison rows to %s", len(rows), out_dir)
    return rows


class _Aggregates(BaseModel):
    rows: List[AggregateRow]
