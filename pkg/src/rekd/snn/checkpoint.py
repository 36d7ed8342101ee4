"""
This module contains the model checkpoint format.

A checkpoint is a directory with a `manifest.json` (network spec, neuron
configuration, seed, epoch and tensor list) and a `tensors.bin` holding the
float64 parameter blobs followed by the 8-bit 0/1 mask blobs.
"""

import logging

from json.decoder import JSONDecodeError
from pathlib import Path
from typing import (
    List,
    Optional,
)

import numpy as np

from pydantic import (
    BaseModel,
    Field,
    ValidationError,
)

from .codec import (
    TensorEntry,
    decode_tensors,
    dump_manifest,
    encode_tensors,
    entry_for,
)
from .config import (
    IFConfig,
    NetworkSpec,
    PruneRanking,
    PruneScope,
)
from .engine import NetworkState
from .exceptions import FormatError


LOGGER = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
TENSORS_FILE = "tensors.bin"
MASK_PREFIX = "mask:"


class PruneInfo(BaseModel):
    """How a sparse teacher checkpoint was pruned."""

    ratio: float = Field(..., description="The requested prune ratio.")
    scope: PruneScope = Field(..., description="The pruned layers.")
    ranking: PruneRanking = Field(..., description="The magnitude ranking.")
    achieved: float = Field(..., description="The achieved overall sparsity.")


class CheckpointManifest(BaseModel):
    format_version: int = Field(FORMAT_VERSION, description="The checkpoint format version.")
    spec: NetworkSpec = Field(..., description="The network topology.")
    if_config: Optional[IFConfig] = Field(
        None, description="The neuron configuration of the first IF layer."
    )
    seed: int = Field(..., description="The initialisation seed.")
    epoch: int = Field(..., description="The number of trained epochs.")
    preset: Optional[str] = Field(None, description="The network preset name.")
    prune: Optional[PruneInfo] = Field(None, description="Set for pruned teachers.")
    teacher_accuracy: Optional[float] = Field(
        None, description="Test accuracy (%) of the pruned teacher."
    )
    tensors: List[TensorEntry] = Field([], description="The blobs in file order.")


def _first_if_config(spec: NetworkSpec) -> Optional[IFConfig]:
    for layer in spec.layers:
        if layer.kind == "if_neuron":
            return layer.config
    return None


def save_checkpoint(
    state: NetworkState,
    path: Path,
    preset: Optional[str] = None,
    prune: Optional[PruneInfo] = None,
    teacher_accuracy: Optional[float] = None,
) -> Path:
    """Write a network state as checkpoint directory.

    Args:
        state: The network state
        path: The checkpoint directory (created if missing)
        preset: The preset the network was built from
        prune: The prune settings of a sparse teacher
        teacher_accuracy: The evaluated teacher accuracy

    Returns:
        The checkpoint directory
    """
    path.mkdir(parents=True, exist_ok=True)
    tensors = [(entry_for(name, p, "f8"), p) for name, p in state.params.items()]
    tensors.extend(
        (entry_for(MASK_PREFIX + name, m, "u1"), m) for name, m in state.masks.items()
    )
    manifest = CheckpointManifest(
        spec=state.spec,
        if_config=_first_if_config(state.spec),
        seed=state.seed,
        epoch=state.epoch,
        preset=preset,
        prune=prune,
        teacher_accuracy=teacher_accuracy,
        tensors=[entry for entry, _ in tensors],
    )
    (path / MANIFEST_FILE).write_bytes(dump_manifest(manifest))
    (path / TENSORS_FILE).write_bytes(encode_tensors(tensors))
    LOGGER.debug("Wrote checkpoint to %s", path)
    return path


def read_manifest(path: Path) -> CheckpointManifest:
    """Read and validate the manifest of a checkpoint directory.

    Raises:
        FormatError: If the manifest is missing or invalid
    """
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.exists():
        raise FormatError(f"'{path}' is not a checkpoint, {MANIFEST_FILE} is missing")
    try:
        manifest = CheckpointManifest.parse_file(manifest_path)
    except (ValidationError, JSONDecodeError) as e:
        raise FormatError(f"invalid checkpoint manifest {manifest_path}: {e}", 0) from e
    if manifest.format_version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {manifest.format_version}", 0
        )
    return manifest


def load_checkpoint(path: Path) -> NetworkState:
    """Load a checkpoint directory written by `save_checkpoint`.

    Args:
        path: The checkpoint directory

    Raises:
        FormatError: For missing files, bad manifests or tensors not matching the spec

    Returns:
        The network state (without momentum buffers or membranes)
    """
    manifest = read_manifest(path)
    tensors = decode_tensors((path / TENSORS_FILE).read_bytes(), manifest.tensors)
    state = NetworkState.initialise(manifest.spec, manifest.seed)
    expected = {name: p.shape for name, p in state.params.items()}
    params = {
        name: t for name, t in tensors.items() if not name.startswith(MASK_PREFIX)
    }
    if {n: p.shape for n, p in params.items()} != expected:
        raise FormatError(f"checkpoint tensors in {path} do not match the network spec")
    state.params = {name: params[name] for name in expected}
    for name, mask in tensors.items():
        if name.startswith(MASK_PREFIX):
            target = name[len(MASK_PREFIX) :]
            if target not in expected or mask.shape != expected[target]:
                raise FormatError(f"mask '{target}' does not match the network spec")
            state.masks[target] = mask.astype(np.float64)
    state.epoch = manifest.epoch
    LOGGER.debug("Loaded checkpoint %s (epoch %d)", path, state.epoch)
    return state
