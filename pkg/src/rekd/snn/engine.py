"""
This module implements the temporal simulation of integrate-and-fire networks
and surrogate-gradient backpropagation through time.

Activations are handled as arrays with a leading `[T, B]` (time, batch) axis
pair. Stateless layers (linear, conv2d, avgpool, flatten, readout) are applied
to all timesteps at once; IF layers unroll the membrane recurrence

    v_candidate = v_prev + x_t
    spike       = v_candidate >= v_threshold
    v_new       = v_reset where spiked, v_candidate otherwise

step by step. The logits are the time average of the non-spiking readout.
"""

from dataclasses import (
    dataclass,
    field,
)
from typing import (
    Dict,
    List,
    Optional,
    Tuple,
)

import numpy as np

from .config import (
    ArctanSurrogate,
    IFConfig,
    NetworkSpec,
)
from .exceptions import (
    DimensionError,
    NumericError,
    ParameterError,
    StateError,
)
from .numerics import (
    DTYPE,
    Tensor,
    avg_pool2d,
    avg_pool2d_backward,
    check_finite,
    conv2d,
    conv2d_backward,
    init_params,
    linear,
    linear_backward,
    make_rng,
)
from .pruning import apply_mask


RELAXED_ALPHA = 2.0
"""Arctangent slope used in relaxed mode when the layer uses a rectangular surrogate."""


@dataclass
class IFRecord:
    """Recorded per-timestep intermediates of one IF layer."""

    v_candidate: Tensor
    spikes: Tensor


@dataclass
class ForwardTrace:
    """Intermediates of a recorded `forward_temporal` call.

    `inputs[i]` is the `[T, B, ...]` input of layer `i`, `neurons[i]` the
    membrane/spike record of IF layer `i`.
    """

    input_shape: Tuple[int, ...]
    relaxed: bool
    inputs: List[Tensor] = field(default_factory=list)
    neurons: Dict[int, IFRecord] = field(default_factory=dict)

    def spike_rates(self) -> Dict[int, float]:
        """Mean firing rate of every IF layer over time, batch and neurons."""
        return {i: float(rec.spikes.mean()) for i, rec in self.neurons.items()}


@dataclass
class NetworkState:
    """Trainable parameters and simulation state of one network.

    Attributes:
        spec: The network topology
        params: The parameter tensors (`<layer>.weight`, `<layer>.bias`)
        masks: Optional 0/1 prune masks keyed like `params`
        velocity: The momentum buffers of `sgd_step`
        membranes: The membrane potentials of the IF layers after the last step
        trace: The intermediates of the last recorded forward pass
        seed: The initialisation seed
        epoch: The number of completed training epochs
    """

    spec: NetworkSpec
    params: Dict[str, Tensor]
    masks: Dict[str, Tensor] = field(default_factory=dict)
    velocity: Dict[str, Tensor] = field(default_factory=dict)
    membranes: Dict[int, Tensor] = field(default_factory=dict)
    trace: Optional[ForwardTrace] = None
    seed: int = 0
    epoch: int = 0

    @classmethod
    def initialise(cls, spec: NetworkSpec, seed: int) -> "NetworkState":
        """Create a freshly initialised network (see `init_params`)."""
        return cls(spec=spec, params=init_params(spec, make_rng(seed)), seed=seed)

    def weight(self, name: str) -> Tensor:
        """The parameter as used by the forward pass (mask applied)."""
        mask = self.masks.get(name)
        value = self.params[name]
        return value if mask is None else apply_mask(value, mask)

    def reset_membranes(self, batch: int):
        """Fill every IF layer membrane with its reset potential."""
        shapes = self.spec.shapes()
        self.membranes = {
            i: np.full((batch, *shapes[i]), layer.config.v_reset, dtype=DTYPE)
            for i, layer in enumerate(self.spec.layers)
            if layer.kind == "if_neuron"
        }

    def clone(self) -> "NetworkState":
        """Deep copy of parameters and masks without simulation state."""
        return NetworkState(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            masks={k: v.copy() for k, v in self.masks.items()},
            velocity={k: v.copy() for k, v in self.velocity.items()},
            seed=self.seed,
            epoch=self.epoch,
        )

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def if_step(v_prev: Tensor, x_t: Tensor, cfg: IFConfig) -> Tuple[Tensor, Tensor]:
    """Advance IF neurons by one timestep.

    Args:
        v_prev: The membrane potentials
        x_t: The input currents
        cfg: The neuron configuration

    Raises:
        DimensionError: If the shapes differ

    Returns:
        The new membrane potentials and the 0/1 spikes
    """
    if v_prev.shape != x_t.shape:
        raise DimensionError(f"membrane {v_prev.shape} vs input {x_t.shape}")
    v_candidate = v_prev + x_t
    spikes = (v_candidate >= cfg.v_threshold).astype(DTYPE)
    v_new = np.where(spikes > 0, cfg.v_reset, v_candidate)
    return v_new, spikes


def _relaxed_alpha(cfg: IFConfig) -> float:
    if isinstance(cfg.surrogate, ArctanSurrogate):
        return cfg.surrogate.alpha
    return RELAXED_ALPHA


def relaxed_step(v_prev: Tensor, x_t: Tensor, cfg: IFConfig) -> Tuple[Tensor, Tensor]:
    """Smooth variant of `if_step` used in relaxed mode.

    The Heaviside spike is replaced by the arctangent primitive
    `atan(pi a u / 2) / pi + 1/2` and the reset is the soft blend
    `v_candidate (1 - s) + v_reset s`.
    """
    if v_prev.shape != x_t.shape:
        raise DimensionError(f"membrane {v_prev.shape} vs input {x_t.shape}")
    alpha = _relaxed_alpha(cfg)
    v_candidate = v_prev + x_t
    u = v_candidate - cfg.v_threshold
    spikes = np.arctan(np.pi * alpha * u / 2) / np.pi + 0.5
    v_new = v_candidate * (1 - spikes) + cfg.v_reset * spikes
    return v_new, spikes


def surrogate_derivative(u: Tensor, cfg: IFConfig) -> Tensor:
    """Surrogate of the spike derivative at `u = v_candidate - v_threshold`.

    - rectangular: `1/w` where `|u| < w/2`, else 0
    - arctangent: `(a/2) / (1 + (pi a u / 2)^2)`
    """
    surrogate = cfg.surrogate
    if isinstance(surrogate, ArctanSurrogate):
        a = surrogate.alpha
        return (a / 2) / (1 + (np.pi * a * u / 2) ** 2)
    w = surrogate.width
    return (np.abs(u) < w / 2).astype(DTYPE) / w


def _relaxed_derivative(u: Tensor, cfg: IFConfig) -> Tensor:
    a = _relaxed_alpha(cfg)
    return (a / 2) / (1 + (np.pi * a * u / 2) ** 2)


def _merge(x: Tensor) -> Tensor:
    """Fold the `[T, B]` axes into one."""
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def forward_temporal(
    state: NetworkState,
    input_seq: Tensor,
    relaxed: bool = False,
    record: bool = True,
) -> Tensor:
    """Simulate the network over all timesteps.

    Membranes are reset to `v_reset` before the unroll, so every call sees
    every sample from a fresh state.

    Args:
        state: The network state
        input_seq: A single sample `[T, *input_shape]` or a batch `[T, B, *input_shape]`
        relaxed: Use the smooth spike primitive instead of the hard threshold
        record: Keep the intermediates in `state.trace` for `backward_temporal`

    Raises:
        DimensionError: If the input does not match the network specification

    Returns:
        The logits `[C]` (single sample) or `[B, C]`
    """
    spec = state.spec
    input_shape = tuple(spec.input_shape)
    single = input_seq.ndim == len(input_shape) + 1
    x = input_seq[:, None] if single else input_seq
    if x.shape[0] != spec.timesteps or tuple(x.shape[2:]) != input_shape:
        raise DimensionError(
            f"expected input [{spec.timesteps}, B, {input_shape}], got {input_seq.shape}"
        )
    steps, batch = x.shape[:2]
    x = np.asarray(x, dtype=DTYPE)
    state.reset_membranes(batch)
    trace = ForwardTrace(input_shape=tuple(input_seq.shape), relaxed=relaxed)

    for i, layer in enumerate(spec.layers):
        trace.inputs.append(x)
        if layer.kind in ("linear", "readout"):
            out = linear(
                _merge(x), state.weight(f"{i}.weight"), state.params[f"{i}.bias"]
            )
            x = out.reshape(steps, batch, -1)
        elif layer.kind == "conv2d":
            out = conv2d(
                _merge(x), state.weight(f"{i}.weight"), layer.stride, layer.padding
            )
            out = out + state.params[f"{i}.bias"][:, None, None]
            x = out.reshape(steps, batch, *out.shape[1:])
        elif layer.kind == "avgpool":
            out = avg_pool2d(_merge(x), layer.kernel_size)
            x = out.reshape(steps, batch, *out.shape[1:])
        elif layer.kind == "flatten":
            x = x.reshape(steps, batch, -1)
        elif layer.kind == "if_neuron":
            step = relaxed_step if relaxed else if_step
            v = state.membranes[i]
            v_candidates = np.empty_like(x)
            spikes = np.empty_like(x)
            for t in range(steps):
                v_candidates[t] = v + x[t]
                v, spikes[t] = step(v, x[t], layer.config)
            state.membranes[i] = v
            trace.neurons[i] = IFRecord(v_candidate=v_candidates, spikes=spikes)
            x = spikes

    logits = check_finite(x.mean(axis=0), "forward_temporal")
    state.trace = trace if record else None
    return logits[0] if single else logits


def backward_temporal(
    state: NetworkState, input_seq: Tensor, grad_logits: Tensor
) -> Dict[str, Tensor]:
    """Backpropagate a logit gradient through the recorded time unroll.

    The spike derivative is replaced by `surrogate_derivative`. In the hard
    mode the reset gate uses the detached spike, i.e. the membrane carry-over
    `v_candidate (1 - s) + v_reset s` is differentiated with respect to
    `v_candidate` only. In relaxed mode the smooth primitive and the soft
    reset are differentiated exactly.

    Args:
        state: The state after a recorded `forward_temporal(state, input_seq)`
        input_seq: The input of that forward pass
        grad_logits: The loss gradient on the logits (`[C]` or `[B, C]`)

    Raises:
        StateError: If no matching forward pass was recorded

    Returns:
        The parameter gradients keyed like `state.params`
    """
    trace = state.trace
    if trace is None:
        raise StateError("backward_temporal requires a recorded forward pass")
    if trace.input_shape != tuple(input_seq.shape):
        raise StateError(
            f"recorded forward pass was for {trace.input_shape}, got {input_seq.shape}"
        )
    spec = state.spec
    g = grad_logits[None] if grad_logits.ndim == 1 else grad_logits
    steps = spec.timesteps
    # d logits / d readout_t = 1/T for every timestep
    grad = np.broadcast_to(g / steps, (steps, *g.shape)).copy()
    grads: Dict[str, Tensor] = {}

    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        x = trace.inputs[i]
        if layer.kind in ("linear", "readout"):
            gx, gw, gb = linear_backward(
                _merge(x), state.weight(f"{i}.weight"), _merge(grad)
            )
            grads[f"{i}.weight"], grads[f"{i}.bias"] = gw, gb
            grad = gx.reshape(x.shape)
        elif layer.kind == "conv2d":
            merged_grad = _merge(grad)
            gx, gw = conv2d_backward(
                _merge(x),
                state.weight(f"{i}.weight"),
                merged_grad,
                layer.stride,
                layer.padding,
            )
            grads[f"{i}.weight"] = gw
            grads[f"{i}.bias"] = merged_grad.sum(axis=(0, 2, 3))
            grad = gx.reshape(x.shape)
        elif layer.kind == "avgpool":
            gx = avg_pool2d_backward(
                _merge(grad), layer.kernel_size, _merge(x).shape
            )
            grad = gx.reshape(x.shape)
        elif layer.kind == "flatten":
            grad = grad.reshape(x.shape)
        elif layer.kind == "if_neuron":
            grad = _if_backward(trace.neurons[i], grad, layer.config, trace.relaxed)

    return {name: grads[name] for name in state.params}


def _if_backward(record: IFRecord, grad_spikes: Tensor, cfg: IFConfig, relaxed: bool):
    grad_x = np.empty_like(grad_spikes)
    grad_v = np.zeros_like(grad_spikes[0])
    for t in reversed(range(grad_spikes.shape[0])):
        v_candidate = record.v_candidate[t]
        spikes = record.spikes[t]
        u = v_candidate - cfg.v_threshold
        if relaxed:
            through_spike = grad_spikes[t] + grad_v * (cfg.v_reset - v_candidate)
            grad_vc = grad_v * (1 - spikes) + through_spike * _relaxed_derivative(u, cfg)
        else:
            grad_vc = grad_v * (1 - spikes) + grad_spikes[t] * surrogate_derivative(
                u, cfg
            )
        grad_x[t] = grad_vc
        grad_v = grad_vc
    return grad_x


def sgd_step(
    state: NetworkState, grads: Dict[str, Tensor], lr: float, momentum: float = 0.0
) -> NetworkState:
    """Apply one classical momentum SGD update in place.

    `velocity = momentum * velocity + grad; param -= lr * velocity`, after
    which every attached prune mask is re-applied so pruned weights stay 0.

    Raises:
        ParameterError: If `lr <= 0` or momentum is outside `[0, 1)`
        NumericError: If a gradient is not finite

    Returns:
        The updated state
    """
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ParameterError(f"momentum must be in [0, 1), got {momentum}")
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {name}")

    for name, grad in grads.items():
        velocity = state.velocity.get(name)
        velocity = grad.copy() if velocity is None else momentum * velocity + grad
        state.velocity[name] = velocity
        updated = state.params[name] - lr * velocity
        mask = state.masks.get(name)
        state.params[name] = updated if mask is None else apply_mask(updated, mask)
    return state
