"""
This module contains the dataset handling: the SRKD file format, direct
encoding of static images, event-to-frame integration, event CSV import and
the synthetic desk-scale dataset generators.
"""

import csv
import logging
import struct

from dataclasses import dataclass
from json.decoder import JSONDecodeError
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Literal,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from pydantic import (
    BaseModel,
    Field,
    ValidationError,
    conint,
)

from .codec import (
    TensorEntry,
    decode_tensors,
    dump_manifest,
    encode_tensors,
    entry_for,
)
from .config import SyntheticConfig
from .exceptions import (
    ConfigurationError,
    DatasetValidationError,
    FormatError,
    ParameterError,
    RangeError,
)
from .numerics import (
    DTYPE,
    Tensor,
    make_rng,
)
from .utils import load_json_file


LOGGER = logging.getLogger(__name__)

MAGIC = b"SRKD"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
"""magic, u32 format version, u64 manifest length"""

SPLITS = ("train", "test")

Encoding = Literal["static-current", "event-frames"]


class EventRecord(NamedTuple):
    """A single event camera event (`t` in microseconds)."""

    t: int
    x: int
    y: int
    polarity: int


class DatasetManifest(BaseModel):
    """Manifest of an SRKD dataset file.

    Example:
        ```json
        {"name": "blobs", "num_classes": 4, "sample_shape": [1, 8, 8],
         "encoding": "static-current", "train_size": 800, "test_size": 400,
         "source": {"generator": {...}}, "tensors": [...]}
        ```
    """

    name: str = Field(..., description="The dataset name.")
    num_classes: conint(ge=2) = Field(..., description="The class count C.")  # type: ignore[valid-type]
    sample_shape: List[int] = Field(
        ...,
        description="`(c, h, w)` images or `(T, 2, h, w)` event frames.",
    )
    encoding: Encoding = Field(..., description="How samples become input sequences.")
    train_size: int = Field(..., description="The number of training samples.")
    test_size: int = Field(..., description="The number of test samples.")
    source: Dict[str, Any] = Field(
        {}, description="The originating file path or generator settings."
    )
    tensors: List[TensorEntry] = Field(
        [], description="The tensor blobs in file order."
    )


@dataclass(eq=False)
class DatasetHandle:
    """An immutable in-memory dataset.

    Attributes:
        manifest: The dataset manifest
        train_x: Training samples `[N, *sample_shape]`
        train_y: Training labels `[N]`
        test_x: Test samples
        test_y: Test labels
    """

    manifest: DatasetManifest
    train_x: Tensor
    train_y: np.ndarray
    test_x: Tensor
    test_y: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetHandle):
            return NotImplemented
        return self.manifest == other.manifest and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.arrays(), other.arrays())
        )

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.train_x, self.train_y, self.test_x, self.test_y)

    def split(self, name: str) -> Tuple[Tensor, np.ndarray]:
        if name == "train":
            return self.train_x, self.train_y
        if name == "test":
            return self.test_x, self.test_y
        raise ParameterError(f"Unknown split '{name}'")

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def frames(self) -> Optional[int]:
        """The number of event frames per sample (`None` for static data)."""
        if self.manifest.encoding == "event-frames":
            return self.manifest.sample_shape[0]
        return None

    @property
    def input_shape(self) -> Tuple[int, ...]:
        """The per-timestep network input shape."""
        shape = tuple(self.manifest.sample_shape)
        return shape[1:] if self.frames is not None else shape

    def sequences(self, split: str, indices: np.ndarray, timesteps: int) -> Tensor:
        """Network input for a batch of samples.

        Args:
            split: `train` or `test`
            indices: The sample indices
            timesteps: The number of simulated timesteps

        Raises:
            ConfigurationError: If event frames do not match the timesteps

        Returns:
            The `[T, B, *input_shape]` input sequences
        """
        x, _ = self.split(split)
        batch = x[indices]
        if self.frames is None:
            return encode_static(batch, timesteps, batched=True)
        if self.frames != timesteps:
            raise ConfigurationError(
                f"dataset has {self.frames} event frames but {timesteps} timesteps requested"
            )
        return np.ascontiguousarray(np.swapaxes(batch, 0, 1))

    def validate(self):
        """Check the dataset against its manifest.

        Raises:
            DatasetValidationError: If any invariant is violated
        """
        m = self.manifest
        for split in SPLITS:
            x, y = self.split(split)
            size = m.train_size if split == "train" else m.test_size
            if x.shape != (size, *m.sample_shape) or y.shape != (size,):
                raise DatasetValidationError(
                    f"{split} split has shape {x.shape}/{y.shape}, "
                    f"manifest declares {size} x {m.sample_shape}"
                )
            if y.size and (y.min() < 0 or y.max() >= m.num_classes):
                bad = int(y[(y < 0) | (y >= m.num_classes)][0])
                raise DatasetValidationError(
                    f"{split} label {bad} outside [0, {m.num_classes})"
                )
            if not np.all(np.isfinite(x)):
                raise DatasetValidationError(f"{split} samples contain non-finite values")


def encode_static(image: Tensor, timesteps: int, batched: bool = False) -> Tensor:
    """Direct encoding: repeat the image as constant input current.

    The first IF layer of the network performs the actual spike encoding.

    Args:
        image: A `[c, h, w]` image (or a `[B, c, h, w]` batch) with values in `[0, 1]`
        timesteps: The number of timesteps
        batched: If `image` is a batch

    Raises:
        ParameterError: If `timesteps < 1`
        RangeError: If a pixel value is not finite or outside `[0, 1]`

    Returns:
        The `[T, ...]` input sequence
    """
    if timesteps < 1:
        raise ParameterError(f"timesteps must be >= 1, got {timesteps}")
    if not np.all(np.isfinite(image)) or np.any(image < 0) or np.any(image > 1):
        raise RangeError("pixel values must be finite and normalized to [0, 1]")
    image = np.asarray(image, dtype=DTYPE)
    return np.repeat(image[None], timesteps, axis=0)


def _event_array(events: Union[Sequence[EventRecord], np.ndarray]) -> np.ndarray:
    array = np.asarray(events, dtype=np.int64)
    return array.reshape(-1, 4)


def integrate_events(
    events: Union[Sequence[EventRecord], np.ndarray],
    width: int,
    height: int,
    timesteps: int,
    window: float,
    normalize: bool = True,
) -> Tensor:
    """Integrate an event stream into per-timestep two channel count frames.

    The span `[0, timesteps * window)` is split into `timesteps` bins and
    `frame[t, p, y, x]` counts the events of polarity `p` at `(x, y)` in bin
    `t`. Events outside the span are ignored. With `normalize` every bin is
    divided by its largest count.

    Args:
        events: Time sorted events (`EventRecord`s or an `[N, 4]` array of t, x, y, p)
        width: The sensor width
        height: The sensor height
        timesteps: The number of bins
        window: The bin duration in microseconds
        normalize: Divide each bin by its max count (raw counts otherwise)

    Raises:
        ParameterError: For a non-positive window or timesteps
        FormatError: For unsorted, negative or out of bounds events

    Returns:
        The `[timesteps, 2, height, width]` frames
    """
    if not window > 0 or timesteps < 1:
        raise ParameterError("window must be > 0 and timesteps >= 1")
    array = _event_array(events)
    frames = np.zeros((timesteps, 2, height, width), dtype=DTYPE)
    if array.shape[0] == 0:
        return frames
    t, x, y, p = array.T
    unsorted = np.flatnonzero(np.diff(t) < 0)
    if unsorted.size:
        raise FormatError("events are not sorted by timestamp", int(unsorted[0]) + 1)
    invalid = np.flatnonzero(
        (t < 0) | (x < 0) | (x >= width) | (y < 0) | (y >= height) | ((p != 0) & (p != 1))
    )
    if invalid.size:
        raise FormatError("event outside of the sensor or with bad polarity", int(invalid[0]))

    bins = (t // window).astype(np.int64)
    inside = bins < timesteps
    np.add.at(frames, (bins[inside], p[inside], y[inside], x[inside]), 1.0)
    if normalize:
        peak = frames.max(axis=(1, 2, 3), keepdims=True)
        frames = np.divide(frames, peak, out=np.zeros_like(frames), where=peak > 0)
    return frames


def batch_order(size: int, seed: int, epoch: int) -> np.ndarray:
    """The sample order of an epoch, a pure function of `(seed, epoch)`."""
    return make_rng(seed, epoch).permutation(size)


def iter_batches(
    size: int, batch_size: int, seed: int, epoch: int
) -> Iterator[np.ndarray]:
    """Yield the shuffled index batches of one epoch (last batch may be smaller)."""
    order = batch_order(size, seed, epoch)
    for start in range(0, size, batch_size):
        yield order[start : start + batch_size]


def _blob_templates(
    rng: np.random.Generator, num_classes: int, shape: Tuple[int, int, int], bumps: int = 3
) -> Tensor:
    c, h, w = shape
    count = num_classes * bumps
    centers = rng.choice(h * w, size=count, replace=count > h * w)
    sigma = max(h, w) / 8
    yy, xx = np.mgrid[0:h, 0:w]
    templates = np.zeros((num_classes, c, h, w), dtype=DTYPE)
    for k in range(num_classes):
        image = np.zeros((h, w), dtype=DTYPE)
        for center in centers[k * bumps : (k + 1) * bumps]:
            cy, cx = divmod(int(center), w)
            image += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        image /= image.max()
        gains = rng.uniform(0.5, 1.0, size=c)
        gains[0] = 1.0
        templates[k] = gains[:, None, None] * image
    return templates


def _labels(rng: np.random.Generator, num_classes: int, per_class: int) -> np.ndarray:
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return labels[rng.permutation(labels.size)]


def _motif_events(
    rng: np.random.Generator, cfg: SyntheticConfig, label: int
) -> np.ndarray:
    """Events of a dot crossing the sensor along a class specific direction.

    Classes `c` and `c + C/2` share a line but cross it in opposite
    directions, so time order matters. Polarity is ON while approaching the
    centre and OFF while leaving it.
    """
    h, w, steps = cfg.height, cfg.width, cfg.timesteps
    angle = 2 * np.pi * label / cfg.num_classes
    radius = (min(h, w) - 1) / 2
    cy, cx = (h - 1) / 2, (w - 1) / 2
    events = []
    for b in range(steps):
        progress = 2 * b / max(steps - 1, 1) - 1
        y = int(round(cy + radius * progress * np.sin(angle)))
        x = int(round(cx + radius * progress * np.cos(angle)))
        polarity = 1 if progress < 0 else 0
        for t in rng.integers(b * cfg.window, (b + 1) * cfg.window, size=4):
            events.append((int(t), x, y, polarity))
    noise_count = rng.poisson(cfg.noise * h * w * steps / 4)
    for _ in range(noise_count):
        events.append(
            (
                int(rng.integers(0, steps * cfg.window)),
                int(rng.integers(0, w)),
                int(rng.integers(0, h)),
                int(rng.integers(0, 2)),
            )
        )
    array = np.array(events, dtype=np.int64)
    return array[np.argsort(array[:, 0], kind="stable")]


def gen_synthetic(cfg: SyntheticConfig) -> DatasetHandle:
    """Generate one of the synthetic desk-scale datasets.

    - `blobs`: images drawn around a per-class template of Gaussian bumps
      with additive Gaussian noise (clipped to `[0, 1]`)
    - `spike-patterns`: class specific event streams (a dot crossing the
      sensor plus uniform noise events) integrated into event frames

    The result is fully determined by `cfg` (including its seed).

    Args:
        cfg: The generator settings

    Returns:
        The generated dataset
    """
    rng = make_rng(cfg.seed)
    C = cfg.num_classes
    split_data: Dict[str, Tuple[Tensor, np.ndarray]] = {}
    if cfg.kind == "blobs":
        shape = (cfg.channels, cfg.height, cfg.width)
        templates = _blob_templates(rng, C, shape)
        for split, per_class in zip(SPLITS, (cfg.train_per_class, cfg.test_per_class)):
            labels = _labels(rng, C, per_class)
            noise = cfg.noise * rng.standard_normal((labels.size, *shape))
            split_data[split] = (np.clip(templates[labels] + noise, 0.0, 1.0), labels)
        sample_shape = list(shape)
        encoding: Encoding = "static-current"
    else:
        for split, per_class in zip(SPLITS, (cfg.train_per_class, cfg.test_per_class)):
            labels = _labels(rng, C, per_class)
            frames = np.stack(
                [
                    integrate_events(
                        _motif_events(rng, cfg, int(label)),
                        cfg.width,
                        cfg.height,
                        cfg.timesteps,
                        cfg.window,
                    )
                    for label in labels
                ]
            )
            split_data[split] = (frames, labels)
        sample_shape = [cfg.timesteps, 2, cfg.height, cfg.width]
        encoding = "event-frames"

    manifest = DatasetManifest(
        name=cfg.kind,
        num_classes=C,
        sample_shape=sample_shape,
        encoding=encoding,
        train_size=split_data["train"][1].size,
        test_size=split_data["test"][1].size,
        source={"generator": cfg.dict()},
    )
    return DatasetHandle(
        manifest,
        *split_data["train"],
        *split_data["test"],
    )


def nearest_template_accuracy(dataset: DatasetHandle, templates: Tensor) -> float:
    """Test accuracy of assigning every sample to its closest template."""
    x, y = dataset.split("test")
    flat = x.reshape(x.shape[0], 1, -1)
    distances = ((flat - templates.reshape(1, templates.shape[0], -1)) ** 2).sum(axis=2)
    return float(np.mean(distances.argmin(axis=1) == y))


def class_means(dataset: DatasetHandle) -> Tensor:
    """Per-class mean training sample."""
    x, y = dataset.split("train")
    return np.stack([x[y == c].mean(axis=0) for c in range(dataset.num_classes)])


def _tensor_entries(dataset: DatasetHandle) -> List[Tuple[TensorEntry, np.ndarray]]:
    return [
        (entry_for(f"{split}_{part}", array, dtype), array)
        for split in SPLITS
        for part, array, dtype in (
            ("x", dataset.split(split)[0], "f8"),
            ("y", dataset.split(split)[1], "i8"),
        )
    ]


def save_dataset(dataset: DatasetHandle, path: Path):
    """Write a dataset as SRKD file.

    Layout: `SRKD` magic, u32 version, u64 manifest length, the JSON
    manifest and the raw little-endian tensor blobs in manifest order.

    Args:
        dataset: The dataset
        path: The file to write
    """
    tensors = _tensor_entries(dataset)
    manifest = dataset.manifest.copy(update={"tensors": [e for e, _ in tensors]})
    encoded = dump_manifest(manifest)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, len(encoded)))
        f.write(encoded)
        f.write(encode_tensors(tensors))
    LOGGER.debug("Wrote dataset %s to %s", manifest.name, path)


def load_dataset(path: Path) -> DatasetHandle:
    """Read and validate an SRKD dataset file.

    Args:
        path: The file to read

    Raises:
        FormatError: For bad magic, version, manifest or truncated data (with byte offset)
        DatasetValidationError: If the data violates the manifest

    Returns:
        The dataset
    """
    buffer = Path(path).read_bytes()
    if buffer[:4] != MAGIC:
        raise FormatError("bad magic bytes, not an SRKD file", 0)
    if len(buffer) < HEADER.size:
        raise FormatError("truncated header", len(buffer))
    _, version, length = HEADER.unpack_from(buffer)
    if version != VERSION:
        raise FormatError(f"unsupported SRKD version {version}", 4)
    start = HEADER.size
    if start + length > len(buffer):
        raise FormatError("truncated manifest", start)
    try:
        manifest = DatasetManifest.parse_raw(buffer[start : start + length])
    except (ValidationError, JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"invalid manifest: {e}", start) from e
    tensors = decode_tensors(buffer, manifest.tensors, start + length)
    try:
        dataset = DatasetHandle(
            manifest,
            tensors["train_x"],
            tensors["train_y"],
            tensors["test_x"],
            tensors["test_y"],
        )
    except KeyError as e:
        raise FormatError(f"missing tensor {e}", start) from e
    dataset.validate()
    return dataset


def load_events_csv(path: Path) -> Tuple[List[EventRecord], Dict[str, Any]]:
    """Load an event stream from `t,x,y,polarity` CSV lines.

    The JSON sidecar next to the file (same name, `.json` suffix) declares
    at least `width` and `height`. A leading header line is skipped.

    Args:
        path: The CSV file

    Raises:
        FormatError: For malformed lines (offset is the line number) or a missing sidecar

    Returns:
        The events and the sidecar data
    """
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    sidecar = load_json_file(sidecar_path)
    if "width" not in sidecar or "height" not in sidecar:
        raise FormatError(f"sidecar {sidecar_path} must declare width and height")
    events: List[EventRecord] = []
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                t, x, y, p = (int(value) for value in row)
            except ValueError as e:
                if line_no == 1:
                    continue
                raise FormatError(f"malformed event line in {path}", line_no) from e
            events.append(EventRecord(t, x, y, p))
    return events, sidecar


def import_events(
    directory: Path,
    timesteps: int,
    window: float,
    normalize: bool = True,
    num_classes: Optional[int] = None,
) -> DatasetHandle:
    """Build an event-frame dataset from a directory of event CSV files.

    Each `*.csv` file holds one sample, its sidecar declares `width`,
    `height`, `label` and `split` (`train` or `test`).

    Args:
        directory: The directory containing the event files
        timesteps: The number of frame bins per sample
        window: The bin duration in microseconds
        normalize: Normalize every bin by its max count
        num_classes: The class count (defaults to the largest label + 1)

    Raises:
        FormatError: For malformed files or inconsistent sensor sizes

    Returns:
        The dataset
    """
    samples: Dict[str, List[Tuple[Tensor, int]]] = {split: [] for split in SPLITS}
    sensor: Optional[Tuple[int, int]] = None
    for path in sorted(directory.glob("*.csv")):
        events, sidecar = load_events_csv(path)
        size = (int(sidecar["height"]), int(sidecar["width"]))
        if sensor is not None and size != sensor:
            raise FormatError(f"{path} has sensor size {size}, expected {sensor}")
        sensor = size
        split = sidecar.get("split", "train")
        if split not in SPLITS:
            raise FormatError(f"{path}: unknown split '{split}'")
        frames = integrate_events(events, size[1], size[0], timesteps, window, normalize)
        samples[split].append((frames, int(sidecar["label"])))
    if sensor is None:
        raise FormatError(f"no event files found in {directory}")

    labels = [label for split in SPLITS for _, label in samples[split]]
    arrays = []
    for split in SPLITS:
        frames = [f for f, _ in samples[split]]
        x = np.stack(frames) if frames else np.zeros((0, timesteps, 2, *sensor))
        y = np.array([label for _, label in samples[split]], dtype=np.int64)
        arrays.extend([x, y])
    manifest = DatasetManifest(
        name=directory.name,
        num_classes=num_classes or max(max(labels) + 1, 2),
        sample_shape=[timesteps, 2, *sensor],
        encoding="event-frames",
        train_size=len(samples["train"]),
        test_size=len(samples["test"]),
        source={"path": str(directory), "window": window, "normalize": normalize},
    )
    dataset = DatasetHandle(manifest, *arrays)
    dataset.validate()
    return dataset
