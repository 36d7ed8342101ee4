"""
This module contains the experiment stages shared by the CLI commands and
the full `run-suite` pipeline: baseline training, teacher pruning, sparse-KD
and default-KD distillation.
"""

import logging

from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Tuple,
)

from . import (
    LAYOUT,
    __version__,
)
from .checkpoint import (
    PruneInfo,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from .config import (
    STATIC_TIMESTEPS,
    ExperimentConfig,
    KDConfig,
    NetworkSpec,
    build_preset,
    resolve_prune_scope,
)
from .data import (
    DatasetHandle,
    gen_synthetic,
    load_dataset,
)
from .distillation import (
    TrainReport,
    VirtualTeacher,
    distill_train,
    evaluate,
    train_baseline,
)
from .engine import NetworkState
from .exceptions import ConfigurationError
from .pruning import (
    compute_mask,
    prune_state,
    sparsity_report,
)
from .report import (
    ComparisonRow,
    build_report,
    load_train_report,
    write_train_report,
)
from .utils import (
    format_ratio,
    load_json_file,
    write_json_file,
)


LOGGER = logging.getLogger(__name__)

Progress = Callable[[str], None]


def _log_progress(message: str):
    LOGGER.info(message)


def resolve_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    """Load the configured dataset file or generate the synthetic benchmark."""
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset)
    return gen_synthetic(cfg.synthetic)


def resolve_timesteps(cfg: ExperimentConfig, dataset: DatasetHandle) -> int:
    """The simulated timesteps: explicit, the event frame count or 4 for static data.

    Raises:
        ConfigurationError: If explicit timesteps disagree with the event frames
    """
    frames = dataset.frames
    if cfg.timesteps is not None:
        if frames is not None and cfg.timesteps != frames:
            raise ConfigurationError(
                f"dataset has {frames} event frames, timesteps must match (got {cfg.timesteps})"
            )
        return cfg.timesteps
    return frames if frames is not None else STATIC_TIMESTEPS


def network_spec(cfg: ExperimentConfig, dataset: DatasetHandle) -> NetworkSpec:
    return build_preset(
        cfg.preset,
        dataset.input_shape,
        dataset.num_classes,
        resolve_timesteps(cfg, dataset),
        cfg.if_config,
    )


def _completed(directory: Path) -> bool:
    return (directory / LAYOUT.REPORT.value).exists() and (
        directory / LAYOUT.CHECKPOINT.value
    ).is_dir()


def _finish(
    report: TrainReport,
    state: NetworkState,
    directory: Path,
    preset: str,
    record_timing: bool,
) -> TrainReport:
    report = report.copy(update={"preset": preset})
    save_checkpoint(state, directory / LAYOUT.CHECKPOINT.value, preset=preset)
    write_train_report(report, directory, record_timing)
    return report


def stage_train(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    seed: int,
    directory: Path,
    record_timing: bool = False,
) -> Tuple[NetworkState, TrainReport]:
    """Train the baseline (and teacher source) network of one seed.

    Args:
        cfg: The experiment configuration
        dataset: The dataset
        seed: The run seed
        directory: The run directory (`checkpoint/`, `report.json`, `report.csv`)
        record_timing: Keep epoch wall times in the written report

    Returns:
        The trained network and its report
    """
    if cfg.resume and _completed(directory):
        LOGGER.info("Reusing completed run %s", directory)
        return (
            load_checkpoint(directory / LAYOUT.CHECKPOINT.value),
            load_train_report(directory / LAYOUT.REPORT.value),
        )
    state = NetworkState.initialise(network_spec(cfg, dataset), seed)
    report = train_baseline(
        state, dataset, cfg.optimizer, seed, cfg.threads, run_id=_run_id(directory)
    )
    return state, _finish(report, state, directory, cfg.preset, record_timing)


def stage_prune(
    cfg: ExperimentConfig,
    state: NetworkState,
    ratio: float,
    directory: Path,
    dataset: Optional[DatasetHandle] = None,
) -> Tuple[NetworkState, PruneInfo, Optional[float]]:
    """Prune a trained network into a sparse teacher checkpoint.

    The teacher is evaluated on the test split when a dataset is given.

    Args:
        cfg: The experiment configuration (prune scope and ranking)
        state: The trained network
        ratio: The prune ratio
        directory: The teacher directory
        dataset: The dataset used to measure the teacher accuracy

    Returns:
        The teacher, its prune info and its test accuracy
    """
    checkpoint_dir = directory / LAYOUT.CHECKPOINT.value
    scope = resolve_prune_scope(cfg.prune_scope, state.spec)
    if cfg.resume and checkpoint_dir.is_dir():
        manifest = read_manifest(checkpoint_dir)
        stored = manifest.prune
        if stored is not None and (stored.ratio, stored.scope, stored.ranking) == (
            ratio,
            scope,
            cfg.prune_ranking,
        ):
            LOGGER.info("Reusing teacher %s", checkpoint_dir)
            return load_checkpoint(checkpoint_dir), stored, manifest.teacher_accuracy
        LOGGER.info("Pruning again, stored teacher %s differs", checkpoint_dir)
    mask = compute_mask(state, ratio, scope, cfg.prune_ranking)
    teacher = prune_state(state, mask)
    info = PruneInfo(
        ratio=ratio,
        scope=scope,
        ranking=cfg.prune_ranking,
        achieved=sparsity_report(mask).overall,
    )
    accuracy = None
    if dataset is not None:
        accuracy = evaluate(teacher, dataset, "test", cfg.threads).accuracy
    save_checkpoint(
        teacher, checkpoint_dir, preset=cfg.preset, prune=info, teacher_accuracy=accuracy
    )
    return teacher, info, accuracy


def stage_distill(
    cfg: ExperimentConfig,
    dataset: DatasetHandle,
    student: NetworkState,
    teacher: Any,
    kd: KDConfig,
    seed: int,
    directory: Path,
    record_timing: bool = False,
    allow_heterogeneous: bool = False,
    prune: Optional[PruneInfo] = None,
    teacher_accuracy: Optional[float] = None,
) -> TrainReport:
    """Distill a student from a sparse or virtual teacher and persist the run.

    Args:
        cfg: The experiment configuration
        dataset: The dataset
        student: The student network, trained in place
        teacher: The sparse teacher network or a `VirtualTeacher`
        kd: The distillation settings (its mode selects the teacher kind)
        seed: The run seed
        directory: The run directory
        record_timing: Keep epoch wall times in the written report
        allow_heterogeneous: Accept a sparse teacher with another topology
        prune: The prune info of a sparse teacher
        teacher_accuracy: The sparse teacher test accuracy

    Returns:
        The training report
    """
    if cfg.resume and _completed(directory):
        LOGGER.info("Reusing completed run %s", directory)
        return load_train_report(directory / LAYOUT.REPORT.value)
    report = distill_train(
        student,
        teacher,
        dataset,
        kd,
        cfg.optimizer,
        seed,
        cfg.threads,
        allow_heterogeneous=allow_heterogeneous,
        run_id=_run_id(directory),
    )
    report = report.copy(
        update={
            "prune_ratio": prune.ratio if prune is not None else None,
            "teacher_accuracy": teacher_accuracy,
        }
    )
    return _finish(report, student, directory, cfg.preset, record_timing)


def _run_id(directory: Path) -> str:
    return f"{directory.parent.name}/{directory.name}"


def run_suite(
    cfg: ExperimentConfig,
    record_timing: bool = False,
    progress: Progress = _log_progress,
) -> List[ComparisonRow]:
    """Run the complete experiment over all seeds and prune ratios.

    Per seed: train the baseline, prune it into one teacher per grid ratio,
    distill a freshly initialised student from every teacher (sparse-KD) and
    from the virtual teacher (default-KD). Finally the comparison report and
    the seed aggregates are written to the output directory.

    Args:
        cfg: The experiment configuration
        record_timing: Keep epoch wall times in the written reports
        progress: Receives one message per stage

    Returns:
        The comparison rows
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    dataset = resolve_dataset(cfg)
    spec = network_spec(cfg, dataset)
    runs: List[str] = []
    write_run_manifest(cfg, out, runs, "run-suite")

    sparse_kd = cfg.kd.copy(update={"mode": "sparse"})
    default_kd = cfg.kd.copy(update={"mode": "default"})
    virtual = VirtualTeacher(dataset.num_classes, cfg.kd.teacher_alpha)

    for seed in cfg.seeds:
        seed_dir = out / LAYOUT.SEED.value.format(seed=seed)
        progress(f"[seed {seed}] training baseline ...")
        baseline, _ = stage_train(
            cfg, dataset, seed, seed_dir / LAYOUT.BASELINE.value, record_timing
        )
        runs.append(f"{seed_dir.name}/{LAYOUT.BASELINE.value}")

        for ratio in cfg.prune_grid:
            label = format_ratio(ratio)
            progress(f"[seed {seed}] pruning teacher (ratio {label}) ...")
            teacher, info, accuracy = stage_prune(
                cfg,
                baseline,
                ratio,
                seed_dir / LAYOUT.TEACHER.value.format(ratio=label),
                dataset,
            )
            progress(f"[seed {seed}] sparse-KD with ratio {label} teacher ...")
            sparse_dir = seed_dir / LAYOUT.SPARSE.value.format(ratio=label)
            stage_distill(
                cfg,
                dataset,
                NetworkState.initialise(spec, seed),
                teacher,
                sparse_kd,
                seed,
                sparse_dir,
                record_timing,
                prune=info,
                teacher_accuracy=accuracy,
            )
            runs.append(f"{seed_dir.name}/{sparse_dir.name}")

        progress(f"[seed {seed}] default-KD with virtual teacher ...")
        stage_distill(
            cfg,
            dataset,
            NetworkState.initialise(spec, seed),
            virtual,
            default_kd,
            seed,
            seed_dir / LAYOUT.DEFAULT.value,
            record_timing,
        )
        runs.append(f"{seed_dir.name}/{LAYOUT.DEFAULT.value}")

    write_run_manifest(cfg, out, runs, "run-suite")
    progress("Writing comparison report ...")
    return build_report(out)


def write_run_manifest(
    cfg: ExperimentConfig, directory: Path, runs: List[str], command: str
) -> Path:
    """Record the configuration and the runs of a command in its output directory.

    An existing manifest keeps its runs, new ones are appended, so single
    stage commands writing into the same directory build up one manifest.

    Args:
        cfg: The experiment configuration
        directory: The directory holding the runs
        runs: Run directories relative to `directory`
        command: The command that produced the runs

    Returns:
        The manifest path
    """
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LAYOUT.RUN_MANIFEST.value
    previous: List[str] = []
    if path.is_file():
        previous = load_json_file(path).get("runs", [])
    write_json_file(_run_manifest(cfg, [*previous, *runs], command), path)
    return path


def _run_manifest(cfg: ExperimentConfig, runs: List[str], command: str) -> Dict[str, Any]:
    config = cfg.dict()
    config["dataset"] = str(cfg.dataset) if cfg.dataset is not None else None
    # neither changes the results
    config.pop("output_dir")
    config.pop("resume")
    return {
        "version": __version__,
        "command": command,
        "config": config,
        "runs": list(dict.fromkeys(runs)),
    }
