import json

from pathlib import Path

import numpy as np
import pytest

from hypothesis import (
    given,
    settings,
)
from hypothesis import strategies as st

from rekd.snn.config import (
    NetworkSpec,
    SyntheticConfig,
)
from rekd.snn.data import (
    HEADER,
    MAGIC,
    DatasetHandle,
    EventRecord,
    batch_order,
    class_means,
    encode_static,
    gen_synthetic,
    import_events,
    integrate_events,
    iter_batches,
    load_dataset,
    load_events_csv,
    nearest_template_accuracy,
    save_dataset,
)
from rekd.snn.engine import (
    NetworkState,
    forward_temporal,
)
from rekd.snn.exceptions import (
    ConfigurationError,
    DatasetValidationError,
    FormatError,
    ParameterError,
    RangeError,
)
from rekd.snn.numerics import make_rng


events_strategy = st.lists(
    st.tuples(
        st.integers(min_value=0, max_value=5000),
        st.integers(min_value=0, max_value=5),
        st.integers(min_value=0, max_value=3),
        st.integers(min_value=0, max_value=1),
    ),
    max_size=40,
).map(sorted)


def test_encode_static_repeats_image():
    image = np.zeros((1, 2, 2))
    image[0, 1, 0] = 0.7

    seq = encode_static(image, 4)

    assert seq.shape == (4, 1, 2, 2)
    assert list(seq[:, 0, 1, 0]) == [0.7, 0.7, 0.7, 0.7]
    assert not np.any(seq[:, 0, 0, 0])


def test_encode_static_zero_image():
    assert not np.any(encode_static(np.zeros((1, 3, 3)), 4))


def test_encode_static_batched():
    seq = encode_static(np.full((5, 1, 2, 2), 0.5), 3, batched=True)

    assert seq.shape == (3, 5, 1, 2, 2)


@pytest.mark.parametrize(
    "image, timesteps, error",
    [
        pytest.param(np.full((1, 2, 2), 1.5), 4, RangeError, id="above-one"),
        pytest.param(np.full((1, 2, 2), -0.1), 4, RangeError, id="negative"),
        pytest.param(np.array([[[0.2, np.nan], [0.0, 1.0]]]), 4, RangeError, id="nan"),
        pytest.param(np.array([[[0.2, np.inf], [0.0, 1.0]]]), 4, RangeError, id="inf"),
        pytest.param(np.zeros((1, 2, 2)), 0, ParameterError, id="no-timesteps"),
    ],
)
def test_encode_static_invalid(image: np.ndarray, timesteps: int, error):
    with pytest.raises(error):
        encode_static(image, timesteps)


def test_encoded_pixel_drives_single_neuron():
    spec = NetworkSpec(
        input_shape=(1, 1, 1),
        timesteps=4,
        layers=[
            {"kind": "flatten"},
            {"kind": "linear", "in_features": 1, "out_features": 1},
            {"kind": "if_neuron"},
            {"kind": "readout", "in_features": 1, "out_features": 2},
        ],
    )
    state = NetworkState.initialise(spec, seed=0)
    state.params["1.weight"] = np.ones((1, 1))

    forward_temporal(state, encode_static(np.full((1, 1, 1), 0.5), 4))

    assert state.trace is not None
    spikes = state.trace.neurons[2].spikes[:, 0, 0]
    assert list(np.flatnonzero(spikes) + 1) == [2, 4]


def test_integrate_events_empty():
    frames = integrate_events([], 4, 3, 2, 100)

    assert frames.shape == (2, 2, 3, 4)
    assert not np.any(frames)


def test_integrate_events_counts_same_cell():
    events = [EventRecord(10, 1, 2, 1), EventRecord(20, 1, 2, 1)]

    frames = integrate_events(events, 4, 3, 2, 100, normalize=False)

    assert frames[0, 1, 2, 1] == 2
    assert frames.sum() == 2


def _brute_force(events, width, height, timesteps, window):
    frames = np.zeros((timesteps, 2, height, width))
    for t, x, y, p in events:
        if t // window < timesteps:
            frames[int(t // window), p, y, x] += 1
    return frames


def test_integrate_events_mixed_bins():
    events = [(5, 0, 0, 1), (50, 2, 1, 0), (150, 2, 1, 1)]

    frames = integrate_events(events, 3, 2, 2, 100, normalize=False)

    assert np.array_equal(frames, _brute_force(events, 3, 2, 2, 100))
    assert frames[0, 1, 0, 0] == 1
    assert frames[0, 0, 1, 2] == 1
    assert frames[1, 1, 1, 2] == 1


@given(events_strategy)
def test_integrate_events_matches_brute_force(events):
    frames = integrate_events(events, 6, 4, 3, 1000, normalize=False)

    assert np.array_equal(frames, _brute_force(events, 6, 4, 3, 1000))


def test_integrate_events_conserves_in_span_events():
    rng = make_rng(2024)
    for _ in range(1000):
        count = int(rng.integers(0, 60))
        t = np.sort(rng.integers(0, 1200, size=count))
        events = np.stack(
            [t, rng.integers(0, 8, count), rng.integers(0, 5, count), rng.integers(0, 2, count)],
            axis=1,
        )

        frames = integrate_events(events, 8, 5, 4, 250, normalize=False)

        assert frames.sum() == np.sum(t < 1000)


@settings(max_examples=50)
@given(events_strategy)
def test_integrate_events_normalized_bins(events):
    frames = integrate_events(events, 6, 4, 3, 1000)

    peaks = frames.max(axis=(1, 2, 3))
    assert set(np.unique(peaks)) <= {0.0, 1.0}
    assert np.all((frames >= 0) & (frames <= 1))


@pytest.mark.parametrize(
    "events, offset",
    [
        pytest.param([(10, 0, 0, 1), (5, 0, 0, 1)], 1, id="unsorted"),
        pytest.param([(1, 0, 0, 1), (2, 4, 0, 1)], 1, id="outside-width"),
        pytest.param([(1, 0, 3, 1)], 0, id="outside-height"),
        pytest.param([(1, 0, 0, 2)], 0, id="bad-polarity"),
        pytest.param([(-1, 0, 0, 1)], 0, id="negative-time"),
    ],
)
def test_integrate_events_invalid(events, offset: int):
    with pytest.raises(FormatError) as excinfo:
        integrate_events(events, 4, 3, 2, 100)

    assert excinfo.value.offset == offset


@pytest.mark.parametrize(
    "timesteps, window",
    [
        pytest.param(0, 100, id="timesteps"),
        pytest.param(2, 0, id="window"),
    ],
)
def test_integrate_events_invalid_parameters(timesteps: int, window: float):
    with pytest.raises(ParameterError):
        integrate_events([], 4, 3, timesteps, window)


def test_gen_synthetic_deterministic(tiny_synthetic: SyntheticConfig):
    assert gen_synthetic(tiny_synthetic) == gen_synthetic(tiny_synthetic)
    assert gen_synthetic(tiny_synthetic) != gen_synthetic(
        tiny_synthetic.copy(update={"seed": 8})
    )


def test_gen_synthetic_noise_free_blobs(tiny_synthetic: SyntheticConfig):
    dataset = gen_synthetic(tiny_synthetic.copy(update={"noise": 0.0}))
    x, y = dataset.split("train")
    templates = np.stack([x[np.flatnonzero(y == c)[0]] for c in range(3)])

    for split in ("train", "test"):
        x, y = dataset.split(split)
        for sample, label in zip(x, y):
            assert np.array_equal(sample, templates[label])
    assert nearest_template_accuracy(dataset, templates) == 1.0
    assert nearest_template_accuracy(dataset, class_means(dataset)) == 1.0


def test_gen_synthetic_manifest(tiny_dataset: DatasetHandle):
    m = tiny_dataset.manifest

    assert m.name == "blobs"
    assert m.encoding == "static-current"
    assert m.sample_shape == [1, 4, 4]
    assert (m.train_size, m.test_size) == (18, 12)
    assert m.source["generator"]["seed"] == 7
    assert tiny_dataset.frames is None
    assert np.array_equal(np.bincount(tiny_dataset.train_y), [6, 6, 6])
    tiny_dataset.validate()


def test_default_benchmark_is_learnable():
    dataset = gen_synthetic(SyntheticConfig())

    assert dataset.manifest.train_size == 800
    assert dataset.manifest.test_size == 400
    assert nearest_template_accuracy(dataset, class_means(dataset)) >= 0.99


def test_gen_synthetic_spike_patterns():
    cfg = SyntheticConfig(
        kind="spike-patterns",
        num_classes=4,
        train_per_class=2,
        test_per_class=1,
        height=6,
        width=6,
        timesteps=5,
    )

    dataset = gen_synthetic(cfg)

    assert dataset.manifest.encoding == "event-frames"
    assert dataset.manifest.sample_shape == [5, 2, 6, 6]
    assert dataset.frames == 5
    assert dataset.input_shape == (2, 6, 6)
    assert np.all((dataset.train_x >= 0) & (dataset.train_x <= 1))
    seq = dataset.sequences("train", np.array([0, 3]), 5)
    assert seq.shape == (5, 2, 2, 6, 6)
    assert np.array_equal(seq[:, 1], dataset.train_x[3])
    with pytest.raises(ConfigurationError):
        dataset.sequences("train", np.array([0]), 4)


def test_sequences_static(tiny_dataset: DatasetHandle):
    seq = tiny_dataset.sequences("test", np.array([2, 0, 1]), 4)

    assert seq.shape == (4, 3, 1, 4, 4)
    assert np.array_equal(seq[3, 0], tiny_dataset.test_x[2])


def test_split_unknown(tiny_dataset: DatasetHandle):
    with pytest.raises(ParameterError):
        tiny_dataset.split("validation")


def test_batch_order():
    assert np.array_equal(batch_order(10, 3, 1), batch_order(10, 3, 1))
    assert not np.array_equal(batch_order(50, 3, 1), batch_order(50, 3, 2))

    batches = list(iter_batches(10, 4, 3, 1))

    assert [b.size for b in batches] == [4, 4, 2]
    assert np.array_equal(np.concatenate(batches), batch_order(10, 3, 1))


def test_dataset_round_trip(tiny_dataset: DatasetHandle, tmp_path: Path):
    path = tmp_path / "tiny.srkd"

    save_dataset(tiny_dataset, path)
    loaded = load_dataset(path)

    assert path.read_bytes()[:4] == MAGIC
    assert loaded == tiny_dataset
    assert loaded.train_y.dtype == np.int64


def test_dataset_file_is_deterministic(tiny_synthetic: SyntheticConfig, tmp_path: Path):
    save_dataset(gen_synthetic(tiny_synthetic), tmp_path / "a.srkd")
    save_dataset(gen_synthetic(tiny_synthetic), tmp_path / "b.srkd")

    assert (tmp_path / "a.srkd").read_bytes() == (tmp_path / "b.srkd").read_bytes()


def _corrupt(path: Path, offset: int, data: bytes):
    buffer = bytearray(path.read_bytes())
    buffer[offset : offset + len(data)] = data
    path.write_bytes(bytes(buffer))


@pytest.mark.parametrize(
    "offset, data, expected_offset",
    [
        pytest.param(0, b"XXXX", 0, id="magic"),
        pytest.param(4, (9).to_bytes(4, "little"), 4, id="version"),
        pytest.param(HEADER.size, b"}", HEADER.size, id="manifest"),
    ],
)
def test_load_dataset_corrupted(
    tiny_dataset: DatasetHandle,
    tmp_path: Path,
    offset: int,
    data: bytes,
    expected_offset: int,
):
    path = tmp_path / "corrupt.srkd"
    save_dataset(tiny_dataset, path)
    _corrupt(path, offset, data)

    with pytest.raises(FormatError) as excinfo:
        load_dataset(path)

    assert excinfo.value.offset == expected_offset


def test_load_dataset_truncated(tiny_dataset: DatasetHandle, tmp_path: Path):
    path = tmp_path / "truncated.srkd"
    save_dataset(tiny_dataset, path)
    path.write_bytes(path.read_bytes()[:-8])

    with pytest.raises(FormatError, match="truncated"):
        load_dataset(path)


def test_load_dataset_label_out_of_range(tiny_synthetic: SyntheticConfig, tmp_path: Path):
    dataset = gen_synthetic(tiny_synthetic.copy(update={"num_classes": 4}))
    dataset.train_y[0] = 7
    path = tmp_path / "bad-label.srkd"
    save_dataset(dataset, path)

    with pytest.raises(DatasetValidationError, match="label 7"):
        load_dataset(path)


def _write_events(directory: Path, name: str, lines, sidecar):
    (directory / f"{name}.csv").write_text("\n".join(lines) + "\n")
    (directory / f"{name}.json").write_text(json.dumps(sidecar))


def test_load_events_csv(tmp_path: Path):
    _write_events(
        tmp_path,
        "sample",
        ["t,x,y,polarity", "0,1,1,1", "120,2,0,0"],
        {"width": 3, "height": 2},
    )

    events, sidecar = load_events_csv(tmp_path / "sample.csv")

    assert events == [EventRecord(0, 1, 1, 1), EventRecord(120, 2, 0, 0)]
    assert sidecar == {"width": 3, "height": 2}


def test_load_events_csv_malformed_line(tmp_path: Path):
    _write_events(
        tmp_path, "sample", ["0,1,1,1", "5,1,x,1"], {"width": 3, "height": 2}
    )

    with pytest.raises(FormatError) as excinfo:
        load_events_csv(tmp_path / "sample.csv")

    assert excinfo.value.offset == 2


def test_load_events_csv_missing_sidecar(tmp_path: Path):
    (tmp_path / "lonely.csv").write_text("0,0,0,1\n")

    with pytest.raises(FormatError, match="sidecar"):
        load_events_csv(tmp_path / "lonely.csv")


def test_import_events(tmp_path: Path):
    sensor = {"width": 3, "height": 2}
    _write_events(tmp_path, "a", ["0,0,0,1", "150,1,1,0"], dict(sensor, label=0, split="train"))
    _write_events(tmp_path, "b", ["20,2,1,1"], dict(sensor, label=1, split="test"))
    _write_events(tmp_path, "c", ["90,2,0,0"], dict(sensor, label=1, split="train"))

    dataset = import_events(tmp_path, timesteps=2, window=100, normalize=False)

    assert dataset.manifest.sample_shape == [2, 2, 2, 3]
    assert dataset.manifest.num_classes == 2
    assert (dataset.manifest.train_size, dataset.manifest.test_size) == (2, 1)
    assert list(dataset.train_y) == [0, 1]
    assert dataset.train_x[0, 1, 0, 1, 1] == 1
    assert dataset.test_x.sum() == 1


def test_import_events_inconsistent_sensor(tmp_path: Path):
    _write_events(tmp_path, "a", ["0,0,0,1"], {"width": 3, "height": 2, "label": 0})
    _write_events(tmp_path, "b", ["0,0,0,1"], {"width": 4, "height": 2, "label": 1})

    with pytest.raises(FormatError):
        import_events(tmp_path, timesteps=2, window=100)


def test_import_events_empty_directory(tmp_path: Path):
    with pytest.raises(FormatError):
        import_events(tmp_path, timesteps=2, window=100)
