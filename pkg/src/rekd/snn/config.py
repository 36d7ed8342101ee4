"""This module contains all configuration model definitions."""

from functools import reduce
from operator import mul
from pathlib import Path
from typing import (
    Annotated,
    Any,
    Dict,
    List,
    Literal,
    Optional,
    Tuple,
    Union,
)

from pydantic import (
    BaseModel,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    confloat,
    conint,
    root_validator,
    validator,
)

from .exceptions import (
    DimensionError,
    ParameterError,
)


Shape = Tuple[int, ...]

TEACHER_ALPHA_MIN = 0.9
"""The virtual teacher correct class probability must be strictly larger than this."""

TEACHER_ALPHA_MAX = 1.0 - 1e-6
"""Largest accepted virtual teacher correct class probability."""

PRUNE_GRID = [0.0, 0.1, 0.3, 0.5, 0.7]
"""The default teacher prune ratio grid."""

STATIC_TIMESTEPS = 4
"""Default number of timesteps for static (directly encoded) data."""

EVENT_TIMESTEPS = 16
"""Default number of timesteps (frame bins) for event data."""

PruneScope = Literal["conv-only", "all-weighted-layers"]
PruneRanking = Literal["global", "per-layer"]
Preset = Literal["mlp", "small-conv"]


def check_teacher_alpha(value: float) -> float:
    """Validate a virtual teacher correct class probability.

    Args:
        value: The probability assigned to the correct class

    Raises:
        ParameterError: If the value is not in `(0.9, 1 - 1e-6]`

    Returns:
        The validated value
    """
    if not TEACHER_ALPHA_MIN < value <= TEACHER_ALPHA_MAX:
        raise ParameterError(
            f"teacher_alpha must be in ({TEACHER_ALPHA_MIN}, {TEACHER_ALPHA_MAX}], "
            f"got {value}"
        )
    return value


class RectangularSurrogate(BaseModel):
    """Rectangular window surrogate `1/w` for `|u| < w/2`."""

    kind: Literal["rectangular"] = "rectangular"
    width: PositiveFloat = Field(1.0, description="The window width `w`.")


class ArctanSurrogate(BaseModel):
    """Arctangent surrogate `(a/2) / (1 + (pi a u / 2)^2)`."""

    kind: Literal["arctangent"] = "arctangent"
    alpha: PositiveFloat = Field(2.0, description="The slope parameter `a`.")


Surrogate = Annotated[
    Union[RectangularSurrogate, ArctanSurrogate], Field(discriminator="kind")
]


class IFConfig(BaseModel):
    """Configuration of an integrate-and-fire neuron layer.

    Example:
        ```yaml
        v_threshold: 1.0
        v_reset: 0.0
        surrogate:
          kind: arctangent
          alpha: 2.0
        ```
    """

    v_threshold: float = Field(1.0, description="The firing threshold.")
    v_reset: float = Field(0.0, description="The hard reset potential.")
    surrogate: Union[RectangularSurrogate, ArctanSurrogate] = Field(
        RectangularSurrogate(),
        discriminator="kind",
        description="The surrogate used for the spike derivative during backward.",
    )

    @root_validator(skip_on_failure=True)
    def check_threshold_above_reset(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        """Validator ensuring `v_threshold > v_reset`.

        Args:
            values: The model attribute dict.

        Returns:
            The validated attribute dict
        """
        assert (
            values["v_threshold"] > values["v_reset"]
        ), "v_threshold must be larger than v_reset"
        return values

    class Config:
        allow_mutation = False


class LinearLayer(BaseModel):
    kind: Literal["linear"] = "linear"
    in_features: PositiveInt
    out_features: PositiveInt

    def output_shape(self, shape: Shape) -> Shape:
        if shape != (self.in_features,):
            raise DimensionError(
                f"linear layer expects ({self.in_features},), got {shape}"
            )
        return (self.out_features,)


class ReadoutLayer(LinearLayer):
    """The final non-spiking linear layer producing the logits."""

    kind: Literal["readout"] = "readout"  # type: ignore[assignment]


class Conv2dLayer(BaseModel):
    kind: Literal["conv2d"] = "conv2d"
    in_channels: PositiveInt
    out_channels: PositiveInt
    kernel_size: PositiveInt
    stride: PositiveInt = 1
    padding: NonNegativeInt = 0

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise DimensionError(
                f"conv2d layer expects ({self.in_channels}, h, w), got {shape}"
            )
        _, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise DimensionError(f"kernel {k} larger than padded input {shape}")
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class AvgPoolLayer(BaseModel):
    kind: Literal["avgpool"] = "avgpool"
    kernel_size: PositiveInt

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise DimensionError(f"avgpool expects (c, h, w), got {shape}")
        c, h, w = shape
        k = self.kernel_size
        if k > h or k > w:
            raise DimensionError(f"pool size {k} larger than input {shape}")
        return (c, h // k, w // k)


class FlattenLayer(BaseModel):
    kind: Literal["flatten"] = "flatten"

    def output_shape(self, shape: Shape) -> Shape:
        return (reduce(mul, shape, 1),)


class IFNeuronLayer(BaseModel):
    kind: Literal["if_neuron"] = "if_neuron"
    config: IFConfig = Field(IFConfig(), description="The neuron configuration.")

    def output_shape(self, shape: Shape) -> Shape:
        return shape


Layer = Annotated[
    Union[
        LinearLayer,
        ReadoutLayer,
        Conv2dLayer,
        AvgPoolLayer,
        FlattenLayer,
        IFNeuronLayer,
    ],
    Field(discriminator="kind"),
]

WEIGHTED_KINDS = ("linear", "conv2d", "readout")


class NetworkSpec(BaseModel):
    """Layer topology of a spiking network.

    The last layer is always the non-spiking readout. Every other weighted
    layer must be followed, possibly after average pooling, by an
    `if_neuron` layer.

    Example:
        ```yaml
        input_shape: [64]
        timesteps: 4
        layers:
          - kind: linear
            in_features: 64
            out_features: 32
          - kind: if_neuron
          - kind: readout
            in_features: 32
            out_features: 4
        ```
    """

    input_shape: Tuple[PositiveInt, ...] = Field(
        ..., description="The per-timestep sample shape (without time/batch axes)."
    )
    layers: List[Layer] = Field(..., description="The ordered layer descriptors.")
    timesteps: PositiveInt = Field(
        STATIC_TIMESTEPS, description="The number of simulated timesteps."
    )

    @validator("layers")
    def check_layer_order(cls, layers: List[Any]) -> List[Any]:
        """Validator enforcing the readout and IF placement rules.

        Args:
            layers: The layer descriptors

        Returns:
            The validated layer descriptors
        """
        assert len(layers) > 0, "a network needs at least a readout layer"
        assert layers[-1].kind == "readout", "the last layer must be the readout"
        assert all(
            layer.kind != "readout" for layer in layers[:-1]
        ), "only the last layer may be a readout"
        for i, layer in enumerate(layers[:-1]):
            if layer.kind not in ("linear", "conv2d"):
                continue
            following = [
                other.kind for other in layers[i + 1 :] if other.kind != "avgpool"
            ]
            assert (
                following[0] == "if_neuron"
            ), f"layer {i} ({layer.kind}) must be followed by an if_neuron layer"
        return layers

    @root_validator(skip_on_failure=True)
    def check_shape_chain(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        """Validator checking that the declared shapes chain end to end.

        Args:
            values: The model attribute dict.

        Returns:
            The validated attribute dict
        """
        _chain(tuple(values["input_shape"]), values["layers"])
        return values

    def shapes(self) -> List[Shape]:
        """The activation shape after every layer (batch axis excluded)."""
        return _chain(tuple(self.input_shape), self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    def weighted_layers(self) -> List[int]:
        """Indices of all layers carrying parameters."""
        return [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED_KINDS]

    def has_conv(self) -> bool:
        return any(layer.kind == "conv2d" for layer in self.layers)


def _chain(shape: Shape, layers: List[Any]) -> List[Shape]:
    shapes = []
    for layer in layers:
        shape = layer.output_shape(shape)
        shapes.append(shape)
    return shapes


def build_preset(
    name: Preset,
    input_shape: Shape,
    num_classes: int,
    timesteps: int,
    if_config: Optional[IFConfig] = None,
    hidden: int = 64,
) -> NetworkSpec:
    """Create one of the desk-scale network presets.

    - `mlp`: flatten, linear → IF, linear → IF, readout
    - `small-conv`: two conv3x3 → IF → avgpool2 blocks, flatten, linear → IF, readout

    Args:
        name: The preset name
        input_shape: The per-timestep sample shape `(c, h, w)`
        num_classes: The number of output classes
        timesteps: The number of simulated timesteps
        if_config: The neuron configuration shared by all IF layers
        hidden: The width of the hidden linear layers

    Returns:
        The network specification
    """
    neuron = {"kind": "if_neuron", "config": (if_config or IFConfig()).dict()}
    flat = reduce(mul, input_shape, 1)
    layers: List[Dict[str, Any]]
    if name == "mlp":
        layers = [
            {"kind": "flatten"},
            {"kind": "linear", "in_features": flat, "out_features": hidden},
            neuron,
            {"kind": "linear", "in_features": hidden, "out_features": hidden},
            neuron,
            {"kind": "readout", "in_features": hidden, "out_features": num_classes},
        ]
    elif name == "small-conv":
        if len(input_shape) != 3:
            raise DimensionError(f"small-conv expects (c, h, w) input, got {input_shape}")
        c, h, w = input_shape
        conv = {"kind": "conv2d", "kernel_size": 3, "stride": 1, "padding": 1}
        layers = [
            dict(conv, in_channels=c, out_channels=8),
            neuron,
            {"kind": "avgpool", "kernel_size": 2},
            dict(conv, in_channels=8, out_channels=16),
            neuron,
            {"kind": "avgpool", "kernel_size": 2},
            {"kind": "flatten"},
            {
                "kind": "linear",
                "in_features": 16 * (h // 4) * (w // 4),
                "out_features": hidden,
            },
            neuron,
            {"kind": "readout", "in_features": hidden, "out_features": num_classes},
        ]
    else:
        raise ParameterError(f"Unknown network preset '{name}'")
    return NetworkSpec(input_shape=input_shape, layers=layers, timesteps=timesteps)


class KDConfig(BaseModel):
    """Configuration of the reverse knowledge distillation loss.

    Two probabilities named alpha are involved: `loss_alpha` weights the KL term of the
    loss and `teacher_alpha` is the correct class probability of the virtual
    teacher. The two are never shared.

    Example:
        ```yaml
        mode: default
        temperature: 4.0
        loss_alpha: 0.9
        teacher_alpha: 0.91
        ```
    """

    mode: Literal["sparse", "default"] = Field(
        "sparse",
        description="Sparse-KD (pruned self-teacher) or default-KD (virtual teacher).",
    )
    temperature: PositiveFloat = Field(
        4.0, description="The softmax temperature `T`."
    )
    loss_alpha: confloat(ge=0.0, le=1.0) = Field(  # type: ignore[valid-type]
        0.9, description="Weight of the KL term, `1 - loss_alpha` weights the CE term."
    )
    kl_direction: Literal["teacher-first", "student-first"] = Field(
        "teacher-first",
        description="KL(teacher || student) (default) or KL(student || teacher).",
    )
    teacher_alpha: float = Field(
        0.91, description="Correct class probability of the virtual teacher."
    )
    harmonized: bool = Field(
        False,
        description=(
            "Add the T^2 factor and the softened student distribution "
            "to the default-KD loss (ablation)."
        ),
    )

    @validator("teacher_alpha")
    def validate_teacher_alpha(cls, val: float) -> float:
        return check_teacher_alpha(val)


class OptimizerConfig(BaseModel):
    """SGD with momentum settings."""

    lr: PositiveFloat = Field(0.1, description="The learning rate.")
    momentum: confloat(ge=0.0, lt=1.0) = Field(  # type: ignore[valid-type]
        0.9, description="The classical momentum coefficient."
    )
    epochs: NonNegativeInt = Field(30, description="The number of training epochs.")
    batch_size: PositiveInt = Field(32, description="The mini-batch size.")


class SyntheticConfig(BaseModel):
    """Settings for the synthetic desk-scale datasets.

    The defaults describe the default benchmark: 4 classes, 200 train and
    100 test samples per class, 8x8 single channel images, noise 0.1.
    """

    kind: Literal["blobs", "spike-patterns"] = "blobs"
    num_classes: conint(ge=2) = 4  # type: ignore[valid-type]
    train_per_class: PositiveInt = 200
    test_per_class: PositiveInt = 100
    height: PositiveInt = 8
    width: PositiveInt = 8
    channels: PositiveInt = 1
    noise: confloat(ge=0.0) = 0.1  # type: ignore[valid-type]
    timesteps: PositiveInt = Field(
        EVENT_TIMESTEPS, description="Frame bins for spike-pattern datasets."
    )
    window: PositiveInt = Field(
        1000, description="Bin duration in microseconds for spike-pattern datasets."
    )
    seed: NonNegativeInt = 7


class ExperimentConfig(BaseModel):
    """Configuration of a complete reverse-KD experiment.

    Example:
        ```yaml
        preset: mlp
        seeds: [1, 2, 3]
        prune_grid: [0.0, 0.1]
        optimizer:
          epochs: 30
          lr: 0.1
        kd:
          temperature: 4.0
          loss_alpha: 0.9
          teacher_alpha: 0.91
        ```
    """

    dataset: Optional[Path] = Field(
        None,
        description="An SRKD dataset file, the synthetic benchmark is generated if unset.",
    )
    synthetic: SyntheticConfig = Field(
        SyntheticConfig(), description="The generator settings used without a dataset."
    )
    preset: Preset = Field("mlp", description="The network preset.")
    timesteps: Optional[PositiveInt] = Field(
        None, description="Timesteps (defaults to 4 for static and 16 for event data)."
    )
    if_config: IFConfig = Field(IFConfig(), description="The IF neuron configuration.")
    optimizer: OptimizerConfig = Field(OptimizerConfig())
    kd: KDConfig = Field(KDConfig())
    prune_grid: List[confloat(ge=0.0, le=1.0)] = Field(  # type: ignore[valid-type]
        PRUNE_GRID, description="The teacher prune ratios."
    )
    prune_scope: Optional[PruneScope] = Field(
        None,
        description=(
            "The pruned layers (defaults to conv-only, "
            "or all-weighted-layers for networks without convolutions)."
        ),
    )
    prune_ranking: PruneRanking = Field("global")
    seeds: List[NonNegativeInt] = Field([0], description="The seeds to run.")
    output_dir: Path = Field(Path("runs"), description="The output directory.")
    threads: PositiveInt = Field(1, description="Evaluation worker threads.")
    resume: bool = Field(False, description="Skip stages with existing results.")

    @validator("dataset")
    def check_dataset_exists(cls, val: Optional[Path]) -> Optional[Path]:
        if val is not None:
            assert val.exists(), f"dataset file '{val}' does not exist"
        return val

    @validator("seeds")
    def check_seeds(cls, val: List[int]) -> List[int]:
        assert len(val) > 0, "at least one seed is required"
        return val


def resolve_prune_scope(scope: Optional[PruneScope], spec: NetworkSpec) -> PruneScope:
    """Resolve an unset prune scope for the given network.

    Args:
        scope: The configured scope (or `None`)
        spec: The network to prune

    Returns:
        `scope` if set, otherwise `conv-only` for networks with convolutions
        and `all-weighted-layers` for pure MLPs.
    """
    if scope is not None:
        return scope
    return "conv-only" if spec.has_conv() else "all-weighted-layers"
