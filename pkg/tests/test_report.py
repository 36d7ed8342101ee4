import csv
import json

from pathlib import Path
from typing import (
    List,
    Optional,
)

import pytest

from rekd.snn import LAYOUT
from rekd.snn.config import OptimizerConfig
from rekd.snn.distillation import (
    EpochMetrics,
    TrainReport,
)
from rekd.snn.exceptions import (
    ConfigurationError,
    FormatError,
)
from rekd.snn.report import (
    ComparisonRow,
    aggregate,
    build_report,
    collect_rows,
    load_train_report,
    render_accuracy_plot,
    write_train_report,
)
from rekd.snn.templates import (
    fixed,
    scale_points,
    signed,
)


def make_report(
    role: str,
    test_accuracies: List[float],
    seed: int = 1,
    prune_ratio: Optional[float] = None,
    run_id: str = "run",
) -> TrainReport:
    history = [
        EpochMetrics(
            epoch=i,
            loss=None if i == 0 else 1.0 / i,
            train_accuracy=acc,
            test_accuracy=acc,
            wall_time=None if i == 0 else 0.5,
        )
        for i, acc in enumerate(test_accuracies)
    ]
    best = max(history, key=lambda m: (m.test_accuracy, -m.epoch))
    return TrainReport(
        run_id=run_id,
        role=role,
        dataset="blobs",
        preset="mlp",
        seed=seed,
        timesteps=4,
        optimizer=OptimizerConfig(epochs=len(history) - 1),
        prune_ratio=prune_ratio,
        initial=history[0],
        epochs=history[1:],
        final_test_accuracy=history[-1].test_accuracy,
        best_test_accuracy=best.test_accuracy,
        best_epoch=best.epoch,
    )


def _write(run_dir: Path, run: str, report: TrainReport):
    write_train_report(report, run_dir / run)


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    for seed, (base, sparse, default) in {1: (80.0, 82.5, 81.0), 2: (70.0, 71.0, 74.0)}.items():
        group = f"seed-{seed}"
        _write(tmp_path, f"{group}/baseline", make_report("baseline", [25.0, 60.0, base], seed))
        _write(
            tmp_path,
            f"{group}/sparse-r0.1",
            make_report("sparse-kd", [25.0, 90.0, sparse], seed, prune_ratio=0.1),
        )
        _write(
            tmp_path,
            f"{group}/sparse-r0.0",
            make_report("sparse-kd", [25.0, base], seed, prune_ratio=0.0),
        )
        _write(tmp_path, f"{group}/default", make_report("default-kd", [25.0, default], seed))
    return tmp_path


def test_write_train_report_without_timing(tmp_path: Path):
    report = make_report("baseline", [25.0, 50.0, 75.0])

    write_train_report(report, tmp_path)

    data = json.loads((tmp_path / LAYOUT.REPORT.value).read_text())
    assert "wall_time" not in data["initial"]
    assert all("wall_time" not in epoch for epoch in data["epochs"])
    rows = list(csv.reader((tmp_path / LAYOUT.REPORT_CSV.value).open()))
    assert rows[0] == ["epoch", "loss", "train_accuracy", "test_accuracy"]
    assert rows[1] == ["0", "", "25.0", "25.0"]
    assert len(rows) == 4


def test_write_train_report_with_timing(tmp_path: Path):
    report = make_report("baseline", [25.0, 50.0])

    write_train_report(report, tmp_path, record_timing=True)

    assert load_train_report(tmp_path / LAYOUT.REPORT.value) == report
    header = next(csv.reader((tmp_path / LAYOUT.REPORT_CSV.value).open()))
    assert header[-1] == "wall_time"


def test_load_train_report_invalid(tmp_path: Path):
    (tmp_path / "report.json").write_text('{"role": "baseline"}')

    with pytest.raises(FormatError):
        load_train_report(tmp_path / "report.json")


def test_single_comparison_row(tmp_path: Path):
    _write(tmp_path, "baseline", make_report("baseline", [20.0, 71.3]))
    _write(tmp_path, "sparse-r0.1", make_report("sparse-kd", [20.0, 72.9], prune_ratio=0.1))

    rows = collect_rows(tmp_path)

    assert len(rows) == 1
    assert rows[0].improvement == 72.9 - 71.3
    assert rows[0].kd_run == "sparse-r0.1"
    assert rows[0].model == "mlp"


def test_collect_rows_order_and_improvement(run_dir: Path):
    rows = collect_rows(run_dir)

    assert [(r.mode, r.prune_ratio, r.seed) for r in rows] == [
        ("sparse-kd", 0.0, 1),
        ("sparse-kd", 0.0, 2),
        ("sparse-kd", 0.1, 1),
        ("sparse-kd", 0.1, 2),
        ("default-kd", None, 1),
        ("default-kd", None, 2),
    ]
    for row in rows:
        assert row.improvement == row.kd_accuracy - row.baseline_accuracy
    assert rows[2].baseline_best_accuracy == 80.0
    assert rows[2].kd_best_accuracy == 90.0


def test_collect_rows_missing_baseline(tmp_path: Path):
    _write(tmp_path, "seed-1/default", make_report("default-kd", [25.0, 50.0]))

    with pytest.raises(ConfigurationError) as excinfo:
        collect_rows(tmp_path)

    assert str(tmp_path / "seed-1" / "baseline" / "report.json") in str(excinfo.value)


def test_collect_rows_empty_directory(tmp_path: Path):
    with pytest.raises(FormatError):
        collect_rows(tmp_path)


def test_aggregate(run_dir: Path):
    aggregates = aggregate(collect_rows(run_dir))

    assert [(a.mode, a.prune_ratio) for a in aggregates] == [
        ("sparse-kd", 0.0),
        ("sparse-kd", 0.1),
        ("default-kd", None),
    ]
    sparse = aggregates[1]
    assert sparse.count == 2
    assert sparse.mean_improvement == pytest.approx(1.75)
    assert sparse.std_improvement == pytest.approx(0.75)
    assert aggregates[0].mean_improvement == 0.0
    assert aggregates[0].std_improvement == 0.0
    assert aggregates[2].mean_baseline_accuracy == pytest.approx(75.0)


def test_build_report(run_dir: Path, tmp_path_factory: pytest.TempPathFactory):
    out = tmp_path_factory.mktemp("out")

    rows = build_report(run_dir, out)

    assert len(rows) == 6
    table = list(csv.DictReader((out / LAYOUT.COMPARISON_CSV.value).open()))
    assert len(table) == 6
    assert list(table[0]) == list(ComparisonRow.__fields__)
    assert table[4]["prune_ratio"] == ""
    text = (out / LAYOUT.COMPARISON_TXT.value).read_text()
    assert text.splitlines()[0].split()[:3] == ["dataset", "model", "seed"]
    assert "+2.50" in text
    aggregates = json.loads((out / LAYOUT.AGGREGATE_JSON.value).read_text())
    assert len(aggregates["rows"]) == 3
    plots = sorted(p.name for p in (out / LAYOUT.PLOTS.value).iterdir())
    assert len(plots) == 8
    assert "seed-1_baseline.svg" in plots


def test_build_report_is_deterministic(run_dir: Path, tmp_path_factory: pytest.TempPathFactory):
    first = tmp_path_factory.mktemp("first")
    second = tmp_path_factory.mktemp("second")

    build_report(run_dir, first)
    build_report(run_dir, second)

    for path in sorted(first.rglob("*")):
        if path.is_file():
            assert path.read_bytes() == (second / path.relative_to(first)).read_bytes()


def test_render_accuracy_plot():
    svg = render_accuracy_plot(make_report("baseline", [0.0, 50.0, 100.0]), title="demo")

    assert svg.startswith("<svg")
    assert svg.rstrip().endswith("</svg>")
    assert "demo" in svg
    assert svg.count("<polyline") == 2
    assert 'points="40.00,280.00 240.00,160.00 440.00,40.00"' in svg


@pytest.mark.parametrize(
    "value, expected_fixed, expected_signed",
    [
        pytest.param(1.5, "1.50", "+1.50", id="positive"),
        pytest.param(-0.25, "-0.25", "-0.25", id="negative"),
        pytest.param(None, "-", "-", id="missing"),
    ],
)
def test_number_filters(value, expected_fixed: str, expected_signed: str):
    assert fixed(value) == expected_fixed
    assert signed(value) == expected_signed


def test_scale_points_degenerate_range():
    assert scale_points([(0, 5)], (0.0, 0.0), (5.0, 5.0)) == "40.00,280.00"
