import math

import numpy as np
import pytest

from rekd.snn.config import (
    PRUNE_GRID,
    NetworkSpec,
)
from rekd.snn.engine import (
    NetworkState,
    forward_temporal,
    sgd_step,
)
from rekd.snn.exceptions import (
    DimensionError,
    ParameterError,
)
from rekd.snn.numerics import make_rng
from rekd.snn.pruning import (
    PruneMask,
    apply_mask,
    compute_mask,
    prunable_names,
    prune_state,
    pruned_count,
    sparsity_report,
)


def _four_weight_state(weights) -> NetworkState:
    spec = NetworkSpec(
        input_shape=(4,),
        layers=[
            {"kind": "linear", "in_features": 4, "out_features": 1},
            {"kind": "if_neuron"},
            {"kind": "readout", "in_features": 1, "out_features": 2},
        ],
    )
    state = NetworkState.initialise(spec, seed=0)
    state.params["0.weight"] = np.array([weights], dtype=float)
    return state


def _two_tensor_state() -> NetworkState:
    # weight tensors with 10 and 6 entries
    spec = NetworkSpec(
        input_shape=(5,),
        layers=[
            {"kind": "linear", "in_features": 5, "out_features": 2},
            {"kind": "if_neuron"},
            {"kind": "linear", "in_features": 2, "out_features": 3},
            {"kind": "if_neuron"},
            {"kind": "readout", "in_features": 3, "out_features": 2},
        ],
    )
    return NetworkState.initialise(spec, seed=1)


def test_prunable_names(mlp_spec: NetworkSpec, conv_spec: NetworkSpec):
    assert prunable_names(mlp_spec, "all-weighted-layers") == ["1.weight", "3.weight"]
    assert prunable_names(mlp_spec, "conv-only") == []
    assert prunable_names(conv_spec, "conv-only") == ["0.weight", "3.weight"]
    assert prunable_names(conv_spec, "all-weighted-layers") == [
        "0.weight",
        "3.weight",
        "7.weight",
    ]


@pytest.mark.parametrize(
    "ratio, total, expected",
    [
        pytest.param(0.3, 16, 4, id="floor"),
        pytest.param(0.29, 100, 29, id="decimal-exact"),
        pytest.param(0.7, 10, 7, id="exact"),
        pytest.param(1.0, 5, 5, id="all"),
        pytest.param(0.0, 5, 0, id="none"),
        pytest.param(np.float64(0.29), 100, 29, id="numpy-scalar"),
        pytest.param(np.float64(0.5), 10, 5, id="numpy-half"),
    ],
)
def test_pruned_count(ratio: float, total: int, expected: int):
    assert pruned_count(ratio, total) == expected


def test_compute_mask_example():
    state = _four_weight_state([0.1, -0.5, 0.2, 0.05])

    mask = compute_mask(state, 0.5, "all-weighted-layers", "per-layer")

    assert np.array_equal(mask.tensors["0.weight"], [[0.0, 1.0, 1.0, 0.0]])


def test_compute_mask_ties_by_index():
    state = _four_weight_state([0.3, -0.3, 0.3, 0.3])

    mask = compute_mask(state, 0.5, "all-weighted-layers")

    assert np.array_equal(mask.tensors["0.weight"], [[0.0, 0.0, 1.0, 1.0]])


@pytest.mark.parametrize(
    "ratio, expected",
    [
        pytest.param(0.0, 1.0, id="unpruned"),
        pytest.param(1.0, 0.0, id="fully-pruned"),
    ],
)
def test_compute_mask_extremes(conv_spec: NetworkSpec, ratio: float, expected: float):
    state = NetworkState.initialise(conv_spec, seed=2)

    mask = compute_mask(state, ratio)

    for tensor in mask.tensors.values():
        assert np.all(tensor == expected)


@pytest.mark.parametrize("ratio", [-0.1, 1.5])
def test_compute_mask_invalid_ratio(mlp_state: NetworkState, ratio: float):
    with pytest.raises(ParameterError):
        compute_mask(mlp_state, ratio)


@pytest.mark.parametrize("ranking", ["global", "per-layer"])
@pytest.mark.parametrize("scope", ["conv-only", "all-weighted-layers"])
@pytest.mark.parametrize("ratio", PRUNE_GRID)
def test_compute_mask_zero_count(
    conv_spec: NetworkSpec, ratio: float, scope: str, ranking: str
):
    state = NetworkState.initialise(conv_spec, seed=3)

    mask = compute_mask(state, ratio, scope, ranking)  # type: ignore[arg-type]

    assert list(mask.tensors) == prunable_names(conv_spec, scope)  # type: ignore[arg-type]
    for tensor in mask.tensors.values():
        assert set(np.unique(tensor)) <= {0.0, 1.0}
    if ranking == "global":
        total = sum(t.size for t in mask.tensors.values())
        zeros = sum(int(np.sum(t == 0)) for t in mask.tensors.values())
        assert zeros == math.floor(ratio * total)
    else:
        for tensor in mask.tensors.values():
            assert int(np.sum(tensor == 0)) == math.floor(ratio * tensor.size)


def test_compute_mask_is_pure(conv_spec: NetworkSpec):
    state = NetworkState.initialise(conv_spec, seed=4)
    before = {k: v.copy() for k, v in state.params.items()}

    first = compute_mask(state, 0.3)
    second = compute_mask(state, 0.3)

    for name in first.tensors:
        assert np.array_equal(first.tensors[name], second.tensors[name])
    for name, value in before.items():
        assert np.array_equal(state.params[name], value)


def test_global_masks_are_nested(conv_spec: NetworkSpec):
    state = NetworkState.initialise(conv_spec, seed=5)
    masks = [compute_mask(state, ratio, "all-weighted-layers") for ratio in PRUNE_GRID]

    for smaller, larger in zip(masks, masks[1:]):
        for name, tensor in smaller.tensors.items():
            assert np.all(larger.tensors[name][tensor == 0] == 0)


@pytest.mark.parametrize(
    "weights, mask, expected",
    [
        pytest.param([[1.0, -2.0], [3.0, 4.0]], [[1, 1], [1, 1]], [[1, -2], [3, 4]], id="ones"),
        pytest.param([[1.0, -2.0], [3.0, 4.0]], [[0, 0], [0, 0]], [[0, 0], [0, 0]], id="zeros"),
        pytest.param([[1.0, -2.0], [3.0, 4.0]], [[0, 1], [1, 0]], [[0, -2], [3, 0]], id="mixed"),
    ],
)
def test_apply_mask(weights, mask, expected):
    result = apply_mask(np.array(weights), np.array(mask, dtype=float))

    assert np.array_equal(result, np.array(expected, dtype=float))


def test_apply_mask_idempotent():
    w = make_rng(0).standard_normal((3, 3))
    m = (make_rng(1).random((3, 3)) > 0.5).astype(float)

    assert np.array_equal(apply_mask(apply_mask(w, m), m), apply_mask(w, m))


def test_apply_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        apply_mask(np.ones((2, 2)), np.ones((2, 3)))


@pytest.mark.parametrize(
    "tensors, expected",
    [
        pytest.param({"a": np.ones(4)}, 0.0, id="unpruned"),
        pytest.param({"a": np.array([0.0, 1.0, 0.0, 1.0])}, 0.5, id="half"),
        pytest.param({}, 0.0, id="empty"),
    ],
)
def test_sparsity_report(tensors, expected: float):
    report = sparsity_report(PruneMask(tensors=tensors, ratio=0.0))

    assert report.overall == expected


def test_sparsity_report_global_ratio():
    state = _two_tensor_state()

    report = sparsity_report(compute_mask(state, 0.3, "all-weighted-layers"))

    assert report.total == 16
    assert report.pruned == 4
    assert report.overall == 0.25
    assert set(report.per_tensor) == {"0.weight", "2.weight"}


def test_masked_forward_equals_premultiplied(conv_spec: NetworkSpec):
    state = NetworkState.initialise(conv_spec, seed=6)
    mask = compute_mask(state, 0.5, "all-weighted-layers")
    masked = state.clone()
    masked.masks = {k: v.copy() for k, v in mask.tensors.items()}
    premultiplied = state.clone()
    for name, tensor in mask.tensors.items():
        premultiplied.params[name] = state.params[name] * tensor
    x = make_rng(7).uniform(0, 1, size=(2, 3, 1, 4, 4))

    assert np.array_equal(
        forward_temporal(masked, x), forward_temporal(premultiplied, x)
    )


def test_prune_state(conv_spec: NetworkSpec):
    state = NetworkState.initialise(conv_spec, seed=8)
    state.velocity = {k: np.ones_like(v) for k, v in state.params.items()}
    mask = compute_mask(state, 0.3)

    pruned = prune_state(state, mask)

    assert pruned.velocity == {}
    assert set(pruned.masks) == {"0.weight", "3.weight"}
    for name, tensor in mask.tensors.items():
        assert np.all(pruned.params[name][tensor == 0] == 0)
        assert np.any(state.params[name][tensor == 0] != 0)


def test_masks_survive_training(conv_spec: NetworkSpec):
    state = NetworkState.initialise(conv_spec, seed=9)
    pruned = prune_state(state, compute_mask(state, 0.5, "all-weighted-layers"))
    rng = make_rng(10)

    for _ in range(100):
        grads = {k: rng.standard_normal(v.shape) for k, v in pruned.params.items()}
        sgd_step(pruned, grads, lr=0.05, momentum=0.9)

    for name, tensor in pruned.masks.items():
        assert np.all(pruned.params[name][tensor == 0] == 0.0)
