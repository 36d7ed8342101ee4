import os

from pathlib import Path

import pytest

from pydantic import ValidationError

from rekd.snn.config import (
    EVENT_TIMESTEPS,
    PRUNE_GRID,
    STATIC_TIMESTEPS,
    ArctanSurrogate,
    ExperimentConfig,
    IFConfig,
    OptimizerConfig,
    RectangularSurrogate,
    build_preset,
    resolve_prune_scope,
)
from rekd.snn.exceptions import (
    DimensionError,
    ParameterError,
)
from rekd.snn.utils import load_file


FILE_DIR = os.path.dirname(__file__) + "/fixtures"


def test_experiment_config_defaults():
    cfg = ExperimentConfig()

    assert cfg.preset == "mlp"
    assert cfg.prune_grid == PRUNE_GRID == [0.0, 0.1, 0.3, 0.5, 0.7]
    assert cfg.prune_scope is None
    assert cfg.prune_ranking == "global"
    assert (cfg.kd.temperature, cfg.kd.loss_alpha, cfg.kd.teacher_alpha) == (4.0, 0.9, 0.91)
    assert cfg.kd.kl_direction == "teacher-first"
    assert not cfg.kd.harmonized
    assert cfg.optimizer == OptimizerConfig(lr=0.1, momentum=0.9, epochs=30, batch_size=32)
    assert isinstance(cfg.if_config.surrogate, RectangularSurrogate)
    assert cfg.if_config.surrogate.width == 1.0
    assert (STATIC_TIMESTEPS, EVENT_TIMESTEPS) == (4, 16)
    assert cfg.synthetic.train_per_class == 200
    assert cfg.synthetic.test_per_class == 100


def test_experiment_config_from_yaml():
    cfg = ExperimentConfig.parse_obj(load_file(f"{FILE_DIR}/experiment.yaml"))

    assert cfg.preset == "small-conv"
    assert cfg.seeds == [1, 2, 3]
    assert cfg.prune_ranking == "per-layer"
    assert cfg.if_config.v_threshold == 0.8
    assert isinstance(cfg.if_config.surrogate, ArctanSurrogate)
    assert cfg.if_config.surrogate.alpha == 2.5
    assert cfg.optimizer.epochs == 5
    assert cfg.optimizer.batch_size == 32
    assert cfg.kd.kl_direction == "student-first"
    assert cfg.synthetic.num_classes == 5


@pytest.mark.parametrize(
    "data",
    [
        pytest.param({"seeds": []}, id="no-seeds"),
        pytest.param({"prune_grid": [0.1, 1.5]}, id="ratio"),
        pytest.param({"preset": "resnet18"}, id="preset"),
        pytest.param({"dataset": "/does/not/exist.srkd"}, id="dataset"),
        pytest.param({"kd": {"teacher_alpha": 0.5}}, id="teacher-alpha"),
        pytest.param({"optimizer": {"momentum": 1.0}}, id="momentum"),
        pytest.param({"synthetic": {"num_classes": 1}}, id="classes"),
        pytest.param({"prune_scope": "everything"}, id="scope"),
    ],
)
def test_experiment_config_invalid(data):
    with pytest.raises(ValidationError):
        ExperimentConfig.parse_obj(data)


def test_if_config_is_immutable():
    cfg = IFConfig()

    with pytest.raises(TypeError):
        cfg.v_threshold = 2.0  # type: ignore[misc]


def test_build_preset_mlp():
    spec = build_preset("mlp", (1, 8, 8), 4, STATIC_TIMESTEPS)

    assert [layer.kind for layer in spec.layers] == [
        "flatten",
        "linear",
        "if_neuron",
        "linear",
        "if_neuron",
        "readout",
    ]
    assert spec.layers[1].in_features == 64
    assert spec.num_classes == 4
    assert spec.timesteps == 4
    assert not spec.has_conv()


def test_build_preset_small_conv():
    if_config = IFConfig(v_threshold=0.5)

    spec = build_preset("small-conv", (2, 8, 8), 4, 16, if_config)

    assert spec.shapes()[-2] == (64,)
    assert spec.layers[7].in_features == 16 * 2 * 2
    assert spec.has_conv()
    assert spec.weighted_layers() == [0, 3, 7, 9]
    assert all(
        layer.config == if_config for layer in spec.layers if layer.kind == "if_neuron"
    )


def test_build_preset_invalid():
    with pytest.raises(DimensionError):
        build_preset("small-conv", (64,), 4, 4)
    with pytest.raises(ParameterError):
        build_preset("vgg16", (1, 8, 8), 4, 4)  # type: ignore[arg-type]


def test_resolve_prune_scope():
    mlp = build_preset("mlp", (1, 4, 4), 3, 4)
    conv = build_preset("small-conv", (1, 4, 4), 3, 4)

    assert resolve_prune_scope(None, mlp) == "all-weighted-layers"
    assert resolve_prune_scope(None, conv) == "conv-only"
    assert resolve_prune_scope("all-weighted-layers", conv) == "all-weighted-layers"


def test_experiment_config_dataset_path(tmp_path: Path):
    path = tmp_path / "d.srkd"
    path.write_bytes(b"")

    assert ExperimentConfig(dataset=path).dataset == path
