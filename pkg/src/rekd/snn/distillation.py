"""
This module contains the reverse knowledge distillation losses, the virtual
teacher and the training loops for baseline, sparse-KD and default-KD runs.

Sparse-KD distills a network from a magnitude pruned copy of its own trained
model:

    L = a T^2 KL(Q_T^T || Q_S^T) + (1 - a) CE(Q_S, y)

Default-KD replaces the teacher network with a fixed virtual distribution
putting `teacher_alpha` on the correct class and spreading the rest evenly:

    L = a KL(Q_T^T || Q_S) + (1 - a) CE(Q_S, y)

where `Q_T^T` is the temperature flattened virtual teacher.
"""

import logging
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import (
    Callable,
    Dict,
    List,
    Literal,
    Optional,
    Tuple,
    Union,
)

import numpy as np

from pydantic import (
    BaseModel,
    Field,
)

from .config import (
    KDConfig,
    OptimizerConfig,
    check_teacher_alpha,
)
from .data import (
    DatasetHandle,
    iter_batches,
)
from .engine import (
    NetworkState,
    backward_temporal,
    forward_temporal,
    sgd_step,
)
from .exceptions import (
    ConfigurationError,
    DimensionError,
    LabelIndexError,
    NumericError,
    ParameterError,
)
from .numerics import (
    PROB_FLOOR,
    Tensor,
    cross_entropy,
    log_softmax_temperature,
    softmax_temperature,
)


LOGGER = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256

Role = Literal["baseline", "sparse-kd", "default-kd"]


@dataclass(frozen=True)
class VirtualTeacher:
    """A manually designed teacher that is always correct.

    Attributes:
        num_classes: The class count `C`
        teacher_alpha: The probability of the correct class
    """

    num_classes: int
    teacher_alpha: float = 0.91

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError(f"a virtual teacher needs C >= 2, got {self.num_classes}")
        check_teacher_alpha(self.teacher_alpha)

    def log_table(self) -> Tensor:
        """`[C, C]` table of log teacher distributions, row `t` for class `t`."""
        return np.log(
            np.stack([virtual_teacher_dist(self, t) for t in range(self.num_classes)])
        )


def virtual_teacher_dist(vt: VirtualTeacher, t: int) -> Tensor:
    """The virtual teacher distribution for target class `t`.

    `p[t] = teacher_alpha`, every other class gets `(1 - teacher_alpha) / (C - 1)`.
    Both values are kept exactly, so the float64 sum of `p` equals 1 up to
    rounding: `|sum(p) - 1| <= C * 2**-52` (below 1e-13 for `C <= 100`).

    Raises:
        LabelIndexError: If `t` is outside `[0, C)`
    """
    C = vt.num_classes
    if not 0 <= t < C:
        raise LabelIndexError(f"class {t} out of range for {C} classes")
    p = np.full(C, (1.0 - vt.teacher_alpha) / (C - 1))
    p[t] = vt.teacher_alpha
    return p


def _check_logits(student_logits: Tensor, teacher: Tensor):
    if student_logits.shape != teacher.shape or student_logits.ndim != 1:
        raise DimensionError(
            f"student {student_logits.shape} and teacher {teacher.shape} must be equal [C] vectors"
        )


def _kl(log_teacher: Tensor, log_student: Tensor, cfg: KDConfig) -> float:
    # log space keeps the KL finite when a softmax entry underflows to 0
    if cfg.kl_direction == "teacher-first":
        log_p, log_q = log_teacher, log_student
    else:
        log_p, log_q = log_student, log_teacher
    return max(float(np.sum(np.exp(log_p) * (log_p - log_q))), 0.0)


def sparse_kd_loss(
    student_logits: Tensor, teacher_logits: Tensor, y: int, cfg: KDConfig
) -> float:
    """Sparse-KD loss of one sample.

    `loss_alpha T^2 KL(Q_T^T || Q_S^T) + (1 - loss_alpha) CE(Q_S, y)` with
    the KL arguments swapped for `kl_direction="student-first"`.

    Args:
        student_logits: The student logits `[C]`
        teacher_logits: The sparse teacher logits `[C]`
        y: The label
        cfg: The distillation settings

    Raises:
        DimensionError: If the logit shapes differ
        LabelIndexError: If `y` is not a class index

    Returns:
        The loss
    """
    _check_logits(student_logits, teacher_logits)
    ce = cross_entropy(softmax_temperature(student_logits, 1.0), y)
    a = cfg.loss_alpha
    if a == 0:
        return ce
    T = cfg.temperature
    kl = _kl(
        log_softmax_temperature(teacher_logits, T),
        log_softmax_temperature(student_logits, T),
        cfg,
    )
    return a * T * T * kl + (1 - a) * ce


def _check_teacher_probs(teacher_probs: Tensor):
    if np.any(teacher_probs <= 0) or abs(teacher_probs.sum() - 1.0) > 1e-9:
        raise ParameterError("teacher_probs must be a strictly positive distribution")


def default_kd_loss(
    student_logits: Tensor, teacher_probs: Tensor, y: int, cfg: KDConfig
) -> float:
    """Default-KD loss of one sample against a virtual teacher distribution.

    The teacher is flattened as `softmax(ln(p) / T)`. Unless `cfg.harmonized`
    is set the student is not softened and no `T^2` factor is applied.

    Args:
        student_logits: The student logits `[C]`
        teacher_probs: The virtual teacher distribution (see `virtual_teacher_dist`)
        y: The label
        cfg: The distillation settings

    Raises:
        ParameterError: If `teacher_probs` is not a positive distribution

    Returns:
        The loss
    """
    _check_logits(student_logits, teacher_probs)
    _check_teacher_probs(teacher_probs)
    ce = cross_entropy(softmax_temperature(student_logits, 1.0), y)
    a = cfg.loss_alpha
    if a == 0:
        return ce
    T = cfg.temperature
    teacher = log_softmax_temperature(np.log(teacher_probs), T)
    if cfg.harmonized:
        student = log_softmax_temperature(student_logits, T)
        return a * T * T * _kl(teacher, student, cfg) + (1 - a) * ce
    student = log_softmax_temperature(student_logits, 1.0)
    return a * _kl(teacher, student, cfg) + (1 - a) * ce


def kd_batch_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    labels: np.ndarray,
    cfg: KDConfig,
    soften_student: bool = True,
    scale: bool = True,
) -> Tuple[float, Tensor]:
    """Mean KD loss of a batch and its gradient on the student logits.

    Args:
        student_logits: The student logits `[B, C]`
        teacher_logits: The teacher logits `[B, C]` (log probabilities for a virtual teacher)
        labels: The labels `[B]`
        cfg: The distillation settings
        soften_student: Compare against the temperature softened student
        scale: Multiply the KL term by `T^2`

    Returns:
        The mean loss and `d mean_loss / d student_logits`
    """
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"student {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    B, C = student_logits.shape
    T = cfg.temperature
    Ts = T if soften_student else 1.0
    a = cfg.loss_alpha
    factor = T * T if scale else 1.0

    log_qs = log_softmax_temperature(student_logits, Ts)
    qs = np.exp(log_qs)
    log_qt = log_softmax_temperature(teacher_logits, T)
    qt = np.exp(log_qt)
    if cfg.kl_direction == "teacher-first":
        kl = np.sum(qt * (log_qt - log_qs), axis=1)
        grad_kl = (qs - qt) / Ts
    else:
        kl = np.sum(qs * (log_qs - log_qt), axis=1)
        grad_kl = qs * (log_qs - log_qt - kl[:, None]) / Ts

    ce, grad_ce = ce_batch_terms(student_logits, labels)
    losses = a * factor * kl + (1 - a) * ce
    grad = a * factor * grad_kl + (1 - a) * grad_ce
    return float(losses.mean()), grad / B


def ce_batch_terms(logits: Tensor, labels: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Per-sample cross-entropy `[B]` and its per-sample logit gradient `[B, C]`."""
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelIndexError(f"labels out of range for {C} classes")
    q = softmax_temperature(logits, 1.0)
    picked = q[np.arange(B), labels]
    ce = -np.log(np.maximum(picked, PROB_FLOOR))
    grad = q.copy()
    grad[np.arange(B), labels] -= 1.0
    return ce, grad


def ce_batch_loss(logits: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """Mean cross-entropy of a batch and its logit gradient."""
    ce, grad = ce_batch_terms(logits, labels)
    return float(ce.mean()), grad / logits.shape[0]


def sparse_kd_grad(
    student_logits: Tensor, teacher_logits: Tensor, y: int, cfg: KDConfig
) -> Tensor:
    """Gradient of `sparse_kd_loss` with respect to the student logits."""
    _check_logits(student_logits, teacher_logits)
    _, grad = kd_batch_loss(
        student_logits[None], teacher_logits[None], np.array([y]), cfg
    )
    return grad[0]


def default_kd_grad(
    student_logits: Tensor, teacher_probs: Tensor, y: int, cfg: KDConfig
) -> Tensor:
    """Gradient of `default_kd_loss` with respect to the student logits."""
    _check_logits(student_logits, teacher_probs)
    _check_teacher_probs(teacher_probs)
    _, grad = kd_batch_loss(
        student_logits[None],
        np.log(teacher_probs)[None],
        np.array([y]),
        cfg,
        soften_student=cfg.harmonized,
        scale=cfg.harmonized,
    )
    return grad[0]


class Evaluation(BaseModel):
    """Accuracy and spiking activity of a network on one split."""

    accuracy: float = Field(..., description="Accuracy in percent.")
    correct: int = Field(..., description="Number of correctly classified samples.")
    total: int = Field(..., description="Number of evaluated samples.")
    spike_rates: Dict[str, float] = Field(
        {}, description="Mean firing rate per IF layer index."
    )


class EpochMetrics(BaseModel):
    epoch: int = Field(..., description="The epoch (0 for the initial evaluation).")
    loss: Optional[float] = Field(None, description="The mean training loss.")
    train_accuracy: float = Field(..., description="Training accuracy in percent.")
    test_accuracy: float = Field(..., description="Test accuracy in percent.")
    wall_time: Optional[float] = Field(None, description="Epoch duration in seconds.")


class TrainReport(BaseModel):
    """The result of a training or distillation run."""

    run_id: str = Field(..., description="The run identifier.")
    role: Role = Field(..., description="baseline, sparse-kd or default-kd")
    dataset: str = Field(..., description="The dataset name.")
    preset: Optional[str] = Field(None, description="The network preset.")
    seed: int = Field(..., description="The run seed.")
    timesteps: int = Field(..., description="The simulated timesteps.")
    optimizer: OptimizerConfig = Field(..., description="The optimizer settings.")
    kd: Optional[KDConfig] = Field(None, description="The distillation settings.")
    prune_ratio: Optional[float] = Field(None, description="The teacher prune ratio.")
    teacher_accuracy: Optional[float] = Field(
        None, description="The teacher test accuracy in percent."
    )
    initial: EpochMetrics = Field(..., description="The evaluation before training.")
    epochs: List[EpochMetrics] = Field([], description="One entry per trained epoch.")
    final_test_accuracy: float = Field(..., description="Test accuracy after the last epoch.")
    best_test_accuracy: float = Field(..., description="Best test accuracy of any epoch.")
    best_epoch: int = Field(..., description="The epoch of the best test accuracy.")

    def history(self) -> List[EpochMetrics]:
        return [self.initial, *self.epochs]


def _evaluate_chunk(
    state: NetworkState, dataset: DatasetHandle, split: str, indices: np.ndarray
) -> Tuple[int, Dict[int, float]]:
    _, labels = dataset.split(split)
    x = dataset.sequences(split, indices, state.spec.timesteps)
    logits = forward_temporal(state, x, record=True)
    assert state.trace is not None
    rates = state.trace.spike_rates()
    state.trace = None
    return int(np.sum(logits.argmax(axis=1) == labels[indices])), rates


def evaluate(
    state: NetworkState,
    dataset: DatasetHandle,
    split: str = "test",
    threads: int = 1,
    batch_size: int = EVAL_BATCH_SIZE,
) -> Evaluation:
    """Classify a split with the hard spiking forward pass.

    With `threads > 1` the batches are spread over a thread pool, every worker
    simulating on its own clone of the state. The result does not depend on
    the thread count.

    Args:
        state: The network (its parameters are not modified)
        dataset: The dataset
        split: `train` or `test`
        threads: The number of worker threads
        batch_size: The evaluation batch size

    Returns:
        The evaluation result
    """
    _, labels = dataset.split(split)
    total = labels.size
    chunks = [
        np.arange(start, min(start + batch_size, total))
        for start in range(0, total, batch_size)
    ]

    def work(indices: np.ndarray) -> Tuple[int, Dict[int, float]]:
        return _evaluate_chunk(state.clone(), dataset, split, indices)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(chunk) for chunk in chunks]

    correct = sum(c for c, _ in results)
    rates: Dict[str, float] = {}
    for (_, chunk_rates), indices in zip(results, chunks):
        for layer, rate in chunk_rates.items():
            rates[str(layer)] = rates.get(str(layer), 0.0) + rate * indices.size / total
    return Evaluation(
        accuracy=100.0 * correct / total if total else 0.0,
        correct=correct,
        total=total,
        spike_rates=rates,
    )


LossFn = Callable[[Tensor, np.ndarray], Tuple[float, Tensor]]
"""Maps student logits `[B, C]` and sample indices to (mean loss, logit gradient)."""


def fit(
    state: NetworkState,
    dataset: DatasetHandle,
    optimizer: OptimizerConfig,
    loss_fn: LossFn,
    seed: int,
    threads: int = 1,
) -> Tuple[EpochMetrics, List[EpochMetrics]]:
    """Train a network in place with surrogate gradient BPTT.

    Epoch `e` visits the training set in the order `batch_order(n, seed, e)`.

    Args:
        state: The network to train
        dataset: The dataset
        optimizer: The optimizer settings
        loss_fn: The batch loss
        seed: The run seed
        threads: Evaluation worker threads

    Raises:
        NumericError: If the loss diverges

    Returns:
        The initial evaluation and one metrics entry per epoch
    """
    initial = EpochMetrics(
        epoch=0,
        train_accuracy=evaluate(state, dataset, "train", threads).accuracy,
        test_accuracy=evaluate(state, dataset, "test", threads).accuracy,
    )
    _, labels = dataset.split("train")
    n = labels.size
    history = []
    for epoch in range(1, optimizer.epochs + 1):
        start = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        for indices in iter_batches(n, optimizer.batch_size, seed, epoch):
            x = dataset.sequences("train", indices, state.spec.timesteps)
            logits = forward_temporal(state, x)
            loss, grad = loss_fn(logits, indices)
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged in epoch {epoch}")
            sgd_step(
                state, backward_temporal(state, x, grad), optimizer.lr, optimizer.momentum
            )
            loss_sum += loss * indices.size
            correct += int(np.sum(logits.argmax(axis=1) == labels[indices]))
        state.trace = None
        state.epoch += 1
        metrics = EpochMetrics(
            epoch=epoch,
            loss=loss_sum / n,
            train_accuracy=100.0 * correct / n,
            test_accuracy=evaluate(state, dataset, "test", threads).accuracy,
            wall_time=time.perf_counter() - start,
        )
        LOGGER.info(
            "epoch %d: loss %.4f train %.2f%% test %.2f%% (%.2fs)",
            epoch,
            metrics.loss,
            metrics.train_accuracy,
            metrics.test_accuracy,
            metrics.wall_time,
        )
        history.append(metrics)
    return initial, history


def _report(
    role: Role,
    run_id: str,
    state: NetworkState,
    dataset: DatasetHandle,
    optimizer: OptimizerConfig,
    seed: int,
    initial: EpochMetrics,
    history: List[EpochMetrics],
    kd: Optional[KDConfig] = None,
) -> TrainReport:
    metrics = [initial, *history]
    # first occurrence wins on ties
    best = max(metrics, key=lambda m: (m.test_accuracy, -m.epoch))
    return TrainReport(
        run_id=run_id,
        role=role,
        dataset=dataset.manifest.name,
        seed=seed,
        timesteps=state.spec.timesteps,
        optimizer=optimizer,
        kd=kd,
        initial=initial,
        epochs=history,
        final_test_accuracy=metrics[-1].test_accuracy,
        best_test_accuracy=best.test_accuracy,
        best_epoch=best.epoch,
    )


def _check_compatible(state: NetworkState, dataset: DatasetHandle):
    if tuple(state.spec.input_shape) != dataset.input_shape:
        raise ConfigurationError(
            f"network input {tuple(state.spec.input_shape)} does not match "
            f"dataset input {dataset.input_shape}"
        )
    if state.spec.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"network has {state.spec.num_classes} outputs, dataset {dataset.num_classes} classes"
        )


def train_baseline(
    state: NetworkState,
    dataset: DatasetHandle,
    optimizer: OptimizerConfig,
    seed: int,
    threads: int = 1,
    run_id: str = "baseline",
) -> TrainReport:
    """Train a network with plain cross-entropy (baseline and teacher training).

    Args:
        state: The freshly initialised network, trained in place
        dataset: The dataset
        optimizer: The optimizer settings
        seed: The run seed
        threads: Evaluation worker threads
        run_id: The run identifier

    Returns:
        The training report
    """
    _check_compatible(state, dataset)
    _, labels = dataset.split("train")
    initial, history = fit(
        state,
        dataset,
        optimizer,
        lambda logits, indices: ce_batch_loss(logits, labels[indices]),
        seed,
        threads,
    )
    return _report("baseline", run_id, state, dataset, optimizer, seed, initial, history)


Teacher = Union[NetworkState, VirtualTeacher]


def distill_train(
    student: NetworkState,
    teacher: Teacher,
    dataset: DatasetHandle,
    cfg: KDConfig,
    optimizer: OptimizerConfig,
    seed: int,
    threads: int = 1,
    allow_heterogeneous: bool = False,
    run_id: str = "distill",
) -> TrainReport:
    """Train a student network under the guidance of a teacher.

    In sparse mode the teacher is a (pruned) network whose logits are
    computed with a hard forward pass and no gradient, its parameters are
    never modified. In default mode the teacher is a `VirtualTeacher`.

    Args:
        student: The student network, trained in place
        teacher: The sparse teacher network or the virtual teacher
        dataset: The dataset
        cfg: The distillation settings
        optimizer: The optimizer settings
        seed: The run seed
        threads: Evaluation worker threads
        allow_heterogeneous: Accept a sparse teacher with another topology
        run_id: The run identifier

    Raises:
        ConfigurationError: If the teacher does not fit the mode or the student

    Returns:
        The training report
    """
    _check_compatible(student, dataset)
    _, labels = dataset.split("train")
    loss_fn: LossFn
    if cfg.mode == "sparse":
        if not isinstance(teacher, NetworkState):
            raise ConfigurationError("sparse-KD requires a teacher network")
        if teacher.spec != student.spec:
            if not allow_heterogeneous:
                raise ConfigurationError(
                    "teacher and student network specs differ "
                    "(allow heterogeneous teachers to distill anyway)"
                )
            if teacher.spec.num_classes != student.spec.num_classes:
                raise ConfigurationError("teacher and student class counts differ")
        frozen = teacher

        def sparse_loss(logits: Tensor, indices: np.ndarray) -> Tuple[float, Tensor]:
            x = dataset.sequences("train", indices, frozen.spec.timesteps)
            teacher_logits = forward_temporal(frozen, x, record=False)
            return kd_batch_loss(logits, teacher_logits, labels[indices], cfg)

        loss_fn = sparse_loss
        role: Role = "sparse-kd"
    else:
        if not isinstance(teacher, VirtualTeacher):
            raise ConfigurationError("default-KD requires a virtual teacher")
        if teacher.num_classes != student.spec.num_classes:
            raise ConfigurationError("virtual teacher and student class counts differ")
        table = teacher.log_table()

        def default_loss(logits: Tensor, indices: np.ndarray) -> Tuple[float, Tensor]:
            y = labels[indices]
            return kd_batch_loss(
                logits,
                table[y],
                y,
                cfg,
                soften_student=cfg.harmonized,
                scale=cfg.harmonized,
            )

        loss_fn = default_loss
        role = "default-kd"

    initial, history = fit(student, dataset, optimizer, loss_fn, seed, threads)
    return _report(role, run_id, student, dataset, optimizer, seed, initial, history, cfg)
