"""This module contains the little-endian tensor blob encoding of datasets and checkpoints."""

import json

from typing import (
    Dict,
    Iterable,
    List,
    Literal,
    Tuple,
)

import numpy as np

from pydantic import (
    BaseModel,
    Field,
)

from .exceptions import FormatError


DTYPES = {
    "f8": np.dtype("<f8"),
    "i8": np.dtype("<i8"),
    "u1": np.dtype("u1"),
}
"""Supported blob dtype codes."""


class TensorEntry(BaseModel):
    """Manifest entry describing one tensor blob."""

    name: str = Field(..., description="The tensor name.")
    dtype: Literal["f8", "i8", "u1"] = Field(..., description="The blob dtype code.")
    shape: List[int] = Field(..., description="The tensor shape.")

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * DTYPES[self.dtype].itemsize


def dump_manifest(model: BaseModel) -> bytes:
    """Serialize a manifest model as compact sorted-key JSON."""
    # round trip through model.json() so nested models and paths become plain data
    data = json.loads(model.json())
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def entry_for(name: str, array: np.ndarray, dtype: str) -> TensorEntry:
    return TensorEntry(name=name, dtype=dtype, shape=list(array.shape))


def encode_tensors(
    tensors: Iterable[Tuple[TensorEntry, np.ndarray]],
) -> bytes:
    """Concatenate the raw little-endian blobs of the given tensors."""
    return b"".join(
        np.ascontiguousarray(array, dtype=DTYPES[entry.dtype]).tobytes()
        for entry, array in tensors
    )


def decode_tensors(
    buffer: bytes, entries: List[TensorEntry], offset: int = 0
) -> Dict[str, np.ndarray]:
    """Read tensor blobs from `buffer` starting at `offset`.

    Args:
        buffer: The file contents
        entries: The manifest tensor entries in blob order
        offset: The byte offset of the first blob

    Raises:
        FormatError: If the buffer is truncated or has trailing bytes

    Returns:
        The decoded tensors keyed by name (float tensors as float64)
    """
    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        end = offset + entry.nbytes
        if end > len(buffer):
            raise FormatError(f"truncated tensor '{entry.name}'", offset)
        dtype = DTYPES[entry.dtype]
        count = entry.nbytes // dtype.itemsize
        array = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset)
        tensors[entry.name] = array.reshape(entry.shape).astype(
            dtype.newbyteorder("="), copy=True
        )
        offset = end
    if offset != len(buffer):
        raise FormatError("unexpected trailing bytes", offset)
    return tensors
