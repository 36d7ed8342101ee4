import pytest

from rekd.snn.config import (
    NetworkSpec,
    SyntheticConfig,
    build_preset,
)
from rekd.snn.data import (
    DatasetHandle,
    gen_synthetic,
)
from rekd.snn.engine import NetworkState


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run the long desk-scale experiments",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_synthetic() -> SyntheticConfig:
    return SyntheticConfig(
        num_classes=3,
        train_per_class=6,
        test_per_class=4,
        height=4,
        width=4,
        seed=7,
    )


@pytest.fixture
def tiny_dataset(tiny_synthetic: SyntheticConfig) -> DatasetHandle:
    return gen_synthetic(tiny_synthetic)


@pytest.fixture
def mlp_spec(tiny_dataset: DatasetHandle) -> NetworkSpec:
    return build_preset(
        "mlp", tiny_dataset.input_shape, tiny_dataset.num_classes, 2, hidden=8
    )


@pytest.fixture
def conv_spec() -> NetworkSpec:
    return build_preset("small-conv", (1, 4, 4), 3, 2, hidden=8)


@pytest.fixture
def mlp_state(mlp_spec: NetworkSpec) -> NetworkState:
    return NetworkState.initialise(mlp_spec, seed=3)
