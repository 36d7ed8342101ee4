"""
This module contains the magnitude based connection pruning used to create
sparse teacher networks (`W_pruned = W * M`).
"""

import logging

from dataclasses import dataclass
from fractions import Fraction
from typing import (
    TYPE_CHECKING,
    Dict,
    List,
)

import numpy as np

from pydantic import (
    BaseModel,
    Field,
)

from .config import (
    NetworkSpec,
    PruneRanking,
    PruneScope,
)
from .exceptions import (
    DimensionError,
    ParameterError,
)


if TYPE_CHECKING:
    from .engine import NetworkState


LOGGER = logging.getLogger(__name__)


@dataclass
class PruneMask:
    """Binary masks for the in-scope weight tensors of a network.

    Attributes:
        tensors: One 0/1 float tensor per pruned parameter, shape matched
        ratio: The requested pruned fraction
        scope: Which layers were considered
        ranking: Global or per-layer magnitude ranking
    """

    tensors: Dict[str, np.ndarray]
    ratio: float
    scope: PruneScope = "conv-only"
    ranking: PruneRanking = "global"


class SparsityReport(BaseModel):
    """Pruned fractions of a mask."""

    per_tensor: Dict[str, float] = Field(
        ..., description="Pruned fraction for every masked tensor."
    )
    pruned: int = Field(..., description="Total number of pruned weights.")
    total: int = Field(..., description="Total number of in-scope weights.")
    overall: float = Field(..., description="`pruned / total` (0 without weights).")


def prunable_names(spec: NetworkSpec, scope: PruneScope) -> List[str]:
    """The weight tensors considered for pruning.

    Biases and the readout are never pruned.

    Args:
        spec: The network specification
        scope: `conv-only` or `all-weighted-layers`

    Returns:
        The parameter names in layer order
    """
    kinds = ("conv2d",) if scope == "conv-only" else ("conv2d", "linear")
    return [
        f"{i}.weight" for i, layer in enumerate(spec.layers) if layer.kind in kinds
    ]


def pruned_count(ratio: float, total: int) -> int:
    """`floor(ratio * total)` evaluated on the decimal value of `ratio`."""
    return int(Fraction(str(float(ratio))) * total)


def _smallest(magnitudes: np.ndarray, ratio: float) -> np.ndarray:
    """Keep-mask (1) zeroing the `floor(ratio * n)` smallest entries.

    The stable sort breaks ties by ascending flat index.
    """
    keep = np.ones(magnitudes.size, dtype=np.float64)
    order = np.argsort(magnitudes, kind="stable")
    keep[order[: pruned_count(ratio, magnitudes.size)]] = 0.0
    return keep


def compute_mask(
    state: "NetworkState",
    ratio: float,
    scope: PruneScope = "conv-only",
    ranking: PruneRanking = "global",
) -> PruneMask:
    """Rank in-scope weights by absolute value and zero the smallest fraction.

    Ties are broken by (tensor index, flat element index) ascending, which
    makes the mask a pure function of its arguments.

    Args:
        state: The trained network (its weights are not modified)
        ratio: The fraction to prune in `[0, 1]`
        scope: The layers considered
        ranking: One global ranking or one ranking per tensor

    Raises:
        ParameterError: If the ratio is outside `[0, 1]`

    Returns:
        The prune mask
    """
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"prune ratio must be in [0, 1], got {ratio}")
    names = prunable_names(state.spec, scope)
    weights = [state.weight(name) for name in names]
    tensors: Dict[str, np.ndarray] = {}
    if ranking == "global":
        if names:
            flat = np.concatenate([np.abs(w).reshape(-1) for w in weights])
            keep = _smallest(flat, ratio)
            offset = 0
            for name, w in zip(names, weights):
                tensors[name] = keep[offset : offset + w.size].reshape(w.shape)
                offset += w.size
    else:
        for name, w in zip(names, weights):
            tensors[name] = _smallest(np.abs(w).reshape(-1), ratio).reshape(w.shape)
    return PruneMask(tensors=tensors, ratio=ratio, scope=scope, ranking=ranking)


def apply_mask(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise `weights * mask` (idempotent).

    Raises:
        DimensionError: If the shapes differ
    """
    if weights.shape != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match weights {weights.shape}")
    return weights * mask


def sparsity_report(mask: PruneMask) -> SparsityReport:
    """Count the pruned entries of a mask.

    Args:
        mask: The prune mask

    Returns:
        The per tensor and overall pruned fractions
    """
    per_tensor = {}
    pruned = total = 0
    for name, tensor in mask.tensors.items():
        zeros = int(np.count_nonzero(tensor == 0))
        per_tensor[name] = zeros / tensor.size
        pruned += zeros
        total += tensor.size
    return SparsityReport(
        per_tensor=per_tensor,
        pruned=pruned,
        total=total,
        overall=pruned / total if total else 0.0,
    )


def prune_state(state: "NetworkState", mask: PruneMask) -> "NetworkState":
    """Create a sparse copy of a network.

    The returned state has the mask multiplied into its weights and attached,
    so any later `sgd_step` keeps the pruned weights at exactly 0.

    Args:
        state: The trained network
        mask: The prune mask

    Returns:
        The pruned network
    """
    pruned = state.clone()
    pruned.velocity = {}
    for name, tensor in mask.tensors.items():
        pruned.params[name] = apply_mask(pruned.params[name], tensor)
        pruned.masks[name] = tensor.copy()
    report = sparsity_report(mask)
    LOGGER.info(
        "Pruned %d of %d weights (%.4f, requested %.4f, %s/%s)",
        report.pruned,
        report.total,
        report.overall,
        mask.ratio,
        mask.scope,
        mask.ranking,
    )
    return pruned
