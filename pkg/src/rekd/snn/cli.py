"""Reverse knowledge distillation SNN CLI module"""

import functools
import logging

from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
)

import click

from pydantic import ValidationError
from ruamel.yaml.error import YAMLError

from . import LAYOUT
from .checkpoint import (
    load_checkpoint,
    read_manifest,
)
from .config import (
    PRUNE_GRID,
    ExperimentConfig,
    SyntheticConfig,
)
from .data import (
    gen_synthetic,
    import_events,
    load_dataset,
    save_dataset,
)
from .distillation import (
    VirtualTeacher,
    evaluate,
)
from .engine import NetworkState
from .exceptions import (
    FormatError,
    NumericError,
    ReKDError,
)
from .pipeline import (
    network_spec,
    resolve_dataset,
    run_suite,
    stage_distill,
    stage_prune,
    stage_train,
    write_run_manifest,
)
from .report import (
    aggregate,
    build_report,
)
from .templates import render_template
from .utils import (
    format_ratio,
    load_file,
    write_json_file,
)


EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(click.UsageError):
    """Usage and validation errors (exit code 1)."""

    exit_code = EXIT_USAGE


class CliError(click.ClickException):
    """A failure with a specific exit code."""

    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class Info:
    """An information object to pass data between CLI functions."""

    def __init__(self):  # Note: This object must have an empty constructor.
        """Create a new instance."""
        self.config: ExperimentConfig = ExperimentConfig()
        self.seed: Optional[int] = None
        self.record_timing: bool = False

    def experiment(self, **overrides: Any) -> ExperimentConfig:
        """The experiment config with all given (not `None`) overrides applied.

        Nested sections are given as dicts, e.g. `optimizer={"lr": 0.05}`.
        """
        data = self.config.dict()
        for key, value in overrides.items():
            if isinstance(value, dict):
                data[key].update({k: v for k, v in value.items() if v is not None})
            elif value is not None:
                data[key] = value
        return ExperimentConfig.parse_obj(data)

    def run_seed(self, cfg: ExperimentConfig) -> int:
        """The seed of a single run: `--seed` or the first configured seed."""
        return self.seed if self.seed is not None else cfg.seeds[0]


# pass_info is a decorator for functions that pass 'Info' objects.
#: pylint: disable=invalid-name
pass_info = click.make_pass_decorator(Info, ensure=True)


class CliPath(click.Path):
    """A Click path argument that returns a pathlib Path, not a string"""

    def convert(self, value, param, ctx):
        return Path(super().convert(value, param, ctx))


class FloatList(click.ParamType):
    """A comma separated list of floats (e.g., `0,0.1,0.3`)."""

    name = "floats"
    cast: Callable[[str], Any] = float

    def convert(self, value, param, ctx):
        if isinstance(value, list):
            return value
        try:
            return [type(self).cast(v) for v in value.split(",") if v.strip()]
        except ValueError:
            self.fail(f"'{value}' is not a comma separated list of {self.name}", param, ctx)


class IntList(FloatList):
    name = "integers"
    cast = int


class ReKDGroup(click.Group):
    """Command group translating library errors into the CLI exit codes.

    - 1: usage and validation errors
    - 2: I/O and file format errors
    - 3: numeric failures
    """

    def make_context(self, *args, **kwargs) -> click.Context:
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except NumericError as e:
            raise CliError(f"Numeric failure: {e}", EXIT_NUMERIC)
        except (FormatError, OSError, YAMLError) as e:
            raise CliError(str(e), EXIT_IO)
        except (ReKDError, ValidationError) as e:
            raise UsageError(str(e), ctx)


def _configure_logging(verbose: int):
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("rekd").setLevel(level)


@click.group(cls=ReKDGroup)
@click.option(
    "--config",
    "-c",
    "config_path",
    type=CliPath(exists=True, dir_okay=False, resolve_path=True, readable=True),
    help="The experiment configuration file (JSON or YAML)",
)
@click.option(
    "--seed",
    type=click.IntRange(min=0),
    help="The run seed (overrides the configured seeds of single runs)",
)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    help="The number of evaluation worker threads",
)
@click.option(
    "--out-dir",
    type=CliPath(file_okay=False, writable=True),
    help="The output directory",
)
@click.option(
    "--record-timing",
    is_flag=True,
    help="Keep epoch wall times in the written reports (breaks byte identical outputs)",
)
@click.option("--verbose", "-v", count=True, help="Increase the log verbosity")
@pass_info
def cli(
    info: Info,
    config_path: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
    out_dir: Optional[Path],
    record_timing: bool,
    verbose: int,
):
    """Reverse knowledge distillation for spiking neural networks."""
    _configure_logging(verbose)
    data: Dict[str, Any] = {}
    if config_path is not None:
        data = load_file(config_path) or {}
    if threads is not None:
        data["threads"] = threads
    if out_dir is not None:
        data["output_dir"] = out_dir
    info.config = ExperimentConfig.parse_obj(data)
    info.seed = seed
    info.record_timing = record_timing


def training_options(f: Callable) -> Callable:
    """Options shared by all commands that train a network."""
    options = [
        click.option(
            "--data",
            "-d",
            type=CliPath(dir_okay=False),
            help="The SRKD dataset file (defaults to the synthetic benchmark)",
        ),
        click.option(
            "--preset", type=click.Choice(["mlp", "small-conv"]), help="The network preset"
        ),
        click.option("--timesteps", type=click.IntRange(min=1), help="Simulated timesteps"),
        click.option("--epochs", type=click.IntRange(min=0), help="Training epochs"),
        click.option("--lr", type=click.FloatRange(min=0, min_open=True), help="Learning rate"),
        click.option(
            "--momentum", type=click.FloatRange(0, 1, max_open=True), help="SGD momentum"
        ),
        click.option("--batch-size", type=click.IntRange(min=1), help="Mini-batch size"),
    ]
    for option in reversed(options):
        f = option(f)

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        data = kwargs["data"]
        if data is not None and not data.exists():
            raise FileNotFoundError(f"dataset file '{data}' does not exist")
        optimizer = {
            key: kwargs.pop(key) for key in ("epochs", "lr", "momentum", "batch_size")
        }
        kwargs["training"] = {
            "dataset": kwargs.pop("data"),
            "preset": kwargs.pop("preset"),
            "timesteps": kwargs.pop("timesteps"),
            "optimizer": optimizer,
        }
        return f(*args, **kwargs)

    return wrapper


def _output_dir(output: Optional[Path], info: Info, name: str) -> Path:
    return output if output is not None else info.config.output_dir / name


@cli.command()
@pass_info
def version(info: Info):
    """Get the library version."""
    from .utils import version_info

    click.echo(version_info(cli_info=info))


@cli.command("gen-data")
@click.option(
    "--kind", type=click.Choice(["blobs", "spike-patterns"]), help="The dataset kind"
)
@click.option("--classes", type=click.IntRange(min=2), help="The number of classes")
@click.option("--train-per-class", type=click.IntRange(min=1), help="Training samples per class")
@click.option("--test-per-class", type=click.IntRange(min=1), help="Test samples per class")
@click.option("--height", type=click.IntRange(min=1), help="The image height")
@click.option("--width", type=click.IntRange(min=1), help="The image width")
@click.option("--channels", type=click.IntRange(min=1), help="The image channels (blobs)")
@click.option("--noise", type=click.FloatRange(min=0), help="The noise level")
@click.option("--timesteps", type=click.IntRange(min=1), help="Frame bins (spike-patterns)")
@click.option("--window", type=click.IntRange(min=1), help="Bin duration in µs (spike-patterns)")
@click.option(
    "--output",
    "-o",
    required=True,
    type=CliPath(dir_okay=False, writable=True),
    help="The dataset file to write",
)
@pass_info
def gen_data(info: Info, output: Path, classes: Optional[int], **settings: Any):
    """Generate a synthetic dataset file."""
    data = info.config.synthetic.dict()
    data.update({k: v for k, v in settings.items() if v is not None})
    if classes is not None:
        data["num_classes"] = classes
    if info.seed is not None:
        data["seed"] = info.seed
    dataset = gen_synthetic(SyntheticConfig.parse_obj(data))
    save_dataset(dataset, output)
    m = dataset.manifest
    click.echo(
        f"Wrote {m.name} dataset to {output}: {m.num_classes} classes, "
        f"sample shape {tuple(m.sample_shape)}, {m.train_size} train / {m.test_size} test "
        f"({m.encoding})"
    )


@cli.command("import-events")
@click.argument("directory", type=CliPath(exists=True, file_okay=False, readable=True))
@click.option("--timesteps", type=click.IntRange(min=1), default=16, show_default=True)
@click.option(
    "--window",
    type=click.FloatRange(min=0, min_open=True),
    default=1000.0,
    show_default=True,
    help="Bin duration in µs",
)
@click.option("--raw", is_flag=True, help="Keep raw event counts instead of normalized frames")
@click.option("--classes", type=click.IntRange(min=2), help="The class count")
@click.option(
    "--output",
    "-o",
    required=True,
    type=CliPath(dir_okay=False, writable=True),
    help="The dataset file to write",
)
def import_events_cmd(
    directory: Path,
    timesteps: int,
    window: float,
    raw: bool,
    classes: Optional[int],
    output: Path,
):
    """Build an event-frame dataset from a directory of event CSV files.

    Every DIRECTORY/*.csv file holds one `t,x,y,polarity` event stream with a
    JSON sidecar declaring `width`, `height`, `label` and `split`.
    """
    dataset = import_events(directory, timesteps, window, not raw, classes)
    save_dataset(dataset, output)
    click.echo(
        f"Imported {dataset.manifest.train_size} train / {dataset.manifest.test_size} "
        f"test samples to {output}"
    )


@cli.command()
@training_options
@click.option(
    "--output", "-o", type=CliPath(file_okay=False, writable=True), help="The run directory"
)
@pass_info
def train(info: Info, training: Dict[str, Any], output: Optional[Path]):
    """Train a baseline/teacher network with plain cross-entropy."""
    cfg = info.experiment(**training)
    seed = info.run_seed(cfg)
    directory = _output_dir(output, info, LAYOUT.BASELINE.value)
    dataset = resolve_dataset(cfg)
    click.echo(f"Training {cfg.preset} network (seed {seed}) ...")
    _, report = stage_train(cfg, dataset, seed, directory, info.record_timing)
    write_run_manifest(cfg, directory.parent, [directory.name], "train")
    click.echo(
        f"Final test accuracy {report.final_test_accuracy:.2f}% "
        f"(best {report.best_test_accuracy:.2f}% in epoch {report.best_epoch})"
    )
    click.echo(f"Run written to {directory}")


@cli.command()
@click.option(
    "--checkpoint",
    "checkpoint_dir",
    required=True,
    type=CliPath(file_okay=False),
    help="The trained network checkpoint",
)
@click.option(
    "--ratio", required=True, type=click.FloatRange(0, 1), help="The fraction of weights to prune"
)
@click.option("--scope", type=click.Choice(["conv-only", "all-weighted-layers"]))
@click.option("--ranking", type=click.Choice(["global", "per-layer"]))
@click.option(
    "--data",
    "-d",
    type=CliPath(dir_okay=False),
    help="Dataset used to measure the teacher accuracy",
)
@click.option(
    "--output", "-o", type=CliPath(file_okay=False, writable=True), help="The teacher directory"
)
@pass_info
def prune(
    info: Info,
    checkpoint_dir: Path,
    ratio: float,
    scope: Optional[str],
    ranking: Optional[str],
    data: Optional[Path],
    output: Optional[Path],
):
    """Prune a trained network into a sparse teacher."""
    cfg = info.experiment(prune_scope=scope, prune_ranking=ranking, resume=False)
    state = load_checkpoint(checkpoint_dir)
    manifest = read_manifest(checkpoint_dir)
    if manifest.preset is not None:
        cfg = cfg.copy(update={"preset": manifest.preset})
    dataset = load_dataset(data) if data is not None else None
    directory = _output_dir(
        output, info, LAYOUT.TEACHER.value.format(ratio=format_ratio(ratio))
    )
    teacher, prune_info, accuracy = stage_prune(cfg, state, ratio, directory, dataset)
    write_run_manifest(cfg, directory.parent, [directory.name], "prune")
    report = _mask_counts(teacher)
    click.echo(
        f"Pruned {report['pruned']} of {report['total']} weights "
        f"({prune_info.achieved:.4f}, {prune_info.scope}/{prune_info.ranking})"
    )
    if accuracy is not None:
        click.echo(f"Teacher test accuracy {accuracy:.2f}%")
    click.echo(f"Teacher written to {directory}")


def _mask_counts(state: NetworkState) -> Dict[str, int]:
    pruned = sum(int((m == 0).sum()) for m in state.masks.values())
    total = sum(m.size for m in state.masks.values())
    return {"pruned": pruned, "total": total}


@cli.command()
@training_options
@click.option(
    "--mode",
    type=click.Choice(["sparse", "default"]),
    help="Sparse-KD (pruned teacher) or default-KD (virtual teacher)",
)
@click.option(
    "--teacher",
    "teacher_dir",
    type=CliPath(file_okay=False),
    help="The sparse teacher checkpoint (sparse mode)",
)
@click.option("--teacher-alpha", type=float, help="Virtual teacher correct class probability")
@click.option("--temperature", type=click.FloatRange(min=0, min_open=True))
@click.option("--loss-alpha", type=click.FloatRange(0, 1), help="Weight of the KL term")
@click.option("--kl-direction", type=click.Choice(["teacher-first", "student-first"]))
@click.option(
    "--harmonized/--verbatim",
    default=None,
    help="Add T^2 and the softened student to the default-KD loss",
)
@click.option(
    "--allow-heterogeneous",
    is_flag=True,
    help="Accept a sparse teacher with a different network spec",
)
@click.option(
    "--init-from",
    type=CliPath(file_okay=False),
    help="Initialise the student from a checkpoint instead of the seed",
)
@click.option(
    "--output", "-o", type=CliPath(file_okay=False, writable=True), help="The run directory"
)
@pass_info
def distill(
    info: Info,
    training: Dict[str, Any],
    mode: Optional[str],
    teacher_dir: Optional[Path],
    teacher_alpha: Optional[float],
    temperature: Optional[float],
    loss_alpha: Optional[float],
    kl_direction: Optional[str],
    harmonized: Optional[bool],
    allow_heterogeneous: bool,
    init_from: Optional[Path],
    output: Optional[Path],
):
    """Train a student network with reverse knowledge distillation."""
    cfg = info.experiment(
        kd={
            "mode": mode,
            "teacher_alpha": teacher_alpha,
            "temperature": temperature,
            "loss_alpha": loss_alpha,
            "kl_direction": kl_direction,
            "harmonized": harmonized,
        },
        resume=False,
        **training,
    )
    seed = info.run_seed(cfg)
    dataset = resolve_dataset(cfg)
    prune_info = None
    teacher_accuracy = None
    teacher: Any
    if cfg.kd.mode == "sparse":
        if teacher_dir is None:
            raise UsageError("sparse mode requires a teacher checkpoint (--teacher)")
        manifest = read_manifest(teacher_dir)
        teacher = load_checkpoint(teacher_dir)
        prune_info = manifest.prune
        teacher_accuracy = manifest.teacher_accuracy
        if training["preset"] is None and manifest.preset is not None:
            cfg = cfg.copy(update={"preset": manifest.preset})
        spec = teacher.spec if training["preset"] is None else network_spec(cfg, dataset)
        name = LAYOUT.SPARSE.value.format(
            ratio=format_ratio(prune_info.ratio if prune_info else 0.0)
        )
    else:
        teacher = VirtualTeacher(dataset.num_classes, cfg.kd.teacher_alpha)
        spec = network_spec(cfg, dataset)
        name = LAYOUT.DEFAULT.value

    if init_from is not None:
        student = load_checkpoint(init_from)
    else:
        student = NetworkState.initialise(spec, seed)
    directory = _output_dir(output, info, name)
    click.echo(f"Distilling student ({cfg.kd.mode}-KD, seed {seed}) ...")
    report = stage_distill(
        cfg,
        dataset,
        student,
        teacher,
        cfg.kd,
        seed,
        directory,
        info.record_timing,
        allow_heterogeneous=allow_heterogeneous,
        prune=prune_info,
        teacher_accuracy=teacher_accuracy,
    )
    write_run_manifest(cfg, directory.parent, [directory.name], "distill")
    click.echo(
        f"Final test accuracy {report.final_test_accuracy:.2f}% "
        f"(best {report.best_test_accuracy:.2f}% in epoch {report.best_epoch})"
    )
    click.echo(f"Run written to {directory}")


@cli.command("eval")
@click.option(
    "--checkpoint",
    "checkpoint_dir",
    required=True,
    type=CliPath(file_okay=False),
    help="The network checkpoint",
)
@click.option(
    "--data",
    "-d",
    type=CliPath(dir_okay=False),
    help="The SRKD dataset file (defaults to the synthetic benchmark)",
)
@click.option(
    "--split", type=click.Choice(["train", "test"]), default="test", show_default=True
)
@click.option(
    "--output",
    "-o",
    type=CliPath(dir_okay=False, writable=True),
    help="Write the evaluation as JSON",
)
@pass_info
def eval_cmd(
    info: Info,
    checkpoint_dir: Path,
    data: Optional[Path],
    split: str,
    output: Optional[Path],
):
    """Evaluate a checkpoint: accuracy and mean firing rate per IF layer."""
    if data is not None and not data.exists():
        raise FileNotFoundError(f"dataset file '{data}' does not exist")
    cfg = info.experiment(dataset=data)
    state = load_checkpoint(checkpoint_dir)
    result = evaluate(state, resolve_dataset(cfg), split, cfg.threads)
    click.echo(f"{split} accuracy {result.accuracy:.2f}% ({result.correct}/{result.total})")
    for layer, rate in result.spike_rates.items():
        click.echo(f"  layer {layer}: spike rate {rate:.4f}")
    if output is not None:
        write_json_file(result.dict(), output)
        write_run_manifest(cfg, output.parent, [output.name], "eval")


@cli.command()
@click.argument("run_dir", type=CliPath(exists=True, file_okay=False, readable=True))
@click.option(
    "--output",
    "-o",
    type=CliPath(file_okay=False, writable=True),
    help="The report output directory (defaults to RUN_DIR)",
)
def report(run_dir: Path, output: Optional[Path]):
    """Compare distilled students against their baselines.

    Writes the comparison table (CSV and text), the seed aggregates and one
    accuracy plot per run.
    """
    rows = build_report(run_dir, output)
    click.echo(
        render_template(
            "comparison.txt.j2", {"rows": rows, "aggregates": aggregate(rows)}
        ),
        nl=False,
    )


@cli.command("run-suite")
@training_options
@click.option("--seeds", type=IntList(), help="Comma separated seeds (e.g., 1,2,3)")
@click.option(
    "--grid",
    type=FloatList(),
    help=f"Comma separated teacher prune ratios (default {','.join(map(str, PRUNE_GRID))})",
)
@click.option("--teacher-alpha", type=float, help="Virtual teacher correct class probability")
@click.option("--resume", is_flag=True, help="Skip stages with existing results")
@pass_info
def run_suite_cmd(
    info: Info,
    training: Dict[str, Any],
    seeds: Optional[List[int]],
    grid: Optional[List[float]],
    teacher_alpha: Optional[float],
    resume: bool,
):
    """Run baseline training, the prune grid and both KD modes for all seeds."""
    if info.seed is not None and seeds is None:
        seeds = [info.seed]
    cfg = info.experiment(
        seeds=seeds,
        prune_grid=grid,
        kd={"teacher_alpha": teacher_alpha},
        resume=resume or None,
        **training,
    )
    rows = run_suite(cfg, info.record_timing, progress=click.echo)
    click.echo(f"{len(rows)} comparison rows written to {cfg.output_dir}")
