"""
This module contains the dense tensor primitives, seeded randomness and the
finite-difference oracle everything else in the package is built on.

All tensors are row-major `numpy.float64` arrays. Contractions are computed
with `numpy.einsum(..., optimize=False)`, which evaluates the sum of products
in a fixed loop order without dispatching to a (possibly multi-threaded) BLAS,
so results are bit-identical for identical inputs.

Randomness uses numpy's `PCG64` bit generator, whose output stream for a given
seed is stable across platforms and runs.
"""

from typing import (
    Callable,
    Dict,
    Sequence,
    Tuple,
)

import numpy as np
import numpy.typing as npt

from .config import NetworkSpec
from .exceptions import (
    DimensionError,
    DivergenceError,
    LabelIndexError,
    NumericError,
    ParameterError,
)


Tensor = npt.NDArray[np.float64]
"""The universal value type (a float64 numpy array)."""

DTYPE = np.float64

RNG_ALGORITHM = "PCG64"

PROB_FLOOR = 1e-12
"""Probability floor used by `cross_entropy`."""


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Create a deterministic random generator.

    Extra `keys` derive independent streams from the same seed
    (e.g., `make_rng(seed, epoch)` for the per-epoch batch order).

    Args:
        seed: The 64-bit unsigned seed
        keys: Optional stream keys

    Returns:
        A numpy generator backed by PCG64
    """
    entropy = [seed, *keys] if keys else seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    """Reject NaN or infinite values.

    Args:
        x: The tensor to check
        where: The operation name used in the error message

    Raises:
        NumericError: If `x` contains a non-finite value

    Returns:
        `x` unchanged
    """
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite value in {where}")
    return x


def as_tensor(data: npt.ArrayLike) -> Tensor:
    """Convert array like data into a finite float64 tensor."""
    return check_finite(np.array(data, dtype=DTYPE), "as_tensor")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of `a[m, k]` and `b[k, n]`.

    Raises:
        DimensionError: If the operands are not matrices with matching inner size
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.einsum("ik,kj->ij", a, b, optimize=False)
    return check_finite(out, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a batch `x[n, in]` with `weight[out, in]`."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects (n, {weight.shape[1]}), got {x.shape}")
    return np.einsum("ni,oi->no", x, weight, optimize=False) + bias


def linear_backward(
    x: Tensor, weight: Tensor, grad_out: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of `linear` with respect to input, weight and bias."""
    grad_x = np.einsum("no,oi->ni", grad_out, weight, optimize=False)
    grad_w = np.einsum("no,ni->oi", grad_out, x, optimize=False)
    return grad_x, grad_w, grad_out.sum(axis=0)


def _windows(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _check_conv(x: Tensor, kernels: Tensor, stride: int, padding: int):
    if stride < 1 or padding < 0:
        raise ParameterError("stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(f"cannot convolve {x.shape} with {kernels.shape}")
    _, _, h, w = x.shape
    _, _, kh, kw = kernels.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kernels.shape[2:]} larger than padded input {(h, w)}"
        )


def conv2d(
    x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2D cross-correlation (no kernel flip) with zero padding.

    Accepts a single input `[c_in, h, w]` or a batch `[n, c_in, h, w]`;
    the output has the same rank with `c_out` channels and
    `h' = floor((h + 2p - kh) / stride) + 1`.

    Args:
        x: The input
        kernels: The kernels `[c_out, c_in, kh, kw]`
        stride: The stride
        padding: The zero padding

    Raises:
        DimensionError: For mismatching channels or kernels larger than the padded input
    """
    single = x.ndim == 3
    batch = x[None] if single else x
    _check_conv(batch, kernels, stride, padding)
    kh, kw = kernels.shape[2:]
    windows = _windows(batch, kh, kw, stride, padding)
    out = np.einsum("nchwij,ocij->nohw", windows, kernels, optimize=False)
    check_finite(out, "conv2d")
    return out[0] if single else out


def conv2d_backward(
    x: Tensor, kernels: Tensor, grad_out: Tensor, stride: int = 1, padding: int = 0
) -> Tuple[Tensor, Tensor]:
    """Gradients of the batched `conv2d` with respect to input and kernels."""
    kh, kw = kernels.shape[2:]
    windows = _windows(x, kh, kw, stride, padding)
    grad_k = np.einsum("nchwij,nohw->ocij", windows, grad_out, optimize=False)

    n, c, h, w = x.shape
    oh, ow = grad_out.shape[2:]
    grad_padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            grad_padded[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ] += np.einsum("nohw,oc->nchw", grad_out, kernels[:, :, i, j], optimize=False)
    grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
    return grad_x, grad_k


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping `k x k` average pooling of `[n, c, h, w]` (remainder rows dropped)."""
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    cropped = x[:, :, : oh * k, : ow * k]
    return cropped.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))


def avg_pool2d_backward(grad_out: Tensor, k: int, input_shape: Sequence[int]) -> Tensor:
    n, c, h, w = input_shape
    oh, ow = grad_out.shape[2:]
    grad = np.zeros((n, c, h, w), dtype=DTYPE)
    spread = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
    grad[:, :, : oh * k, : ow * k] = spread
    return grad


def _check_temperature(T: float):
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")


def log_softmax_temperature(z: Tensor, T: float = 1.0) -> Tensor:
    """Logarithm of `softmax_temperature` along the last axis."""
    _check_temperature(T)
    check_finite(z, "log_softmax_temperature")
    scaled = z / T
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_temperature(z: Tensor, T: float = 1.0) -> Tensor:
    """Temperature flattened softmax `q_i = exp(z_i/T) / sum_j exp(z_j/T)`.

    The maximum is subtracted before exponentiation, which leaves the
    result unchanged but prevents overflow. Works along the last axis.

    Args:
        z: The logits `[..., C]`
        T: The temperature

    Raises:
        ParameterError: If `T <= 0`

    Returns:
        The probabilities
    """
    _check_temperature(T)
    check_finite(z, "softmax_temperature")
    scaled = z / T
    e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_distribution(p: Tensor, name: str):
    if p.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ParameterError(f"{name} is not a probability vector")


def kl_divergence(p: Tensor, q: Tensor) -> float:
    """Kullback-Leibler divergence `sum_i p_i ln(p_i / q_i)`.

    Entries with `p_i = 0` contribute nothing.

    Raises:
        DimensionError: If the shapes differ
        ParameterError: If an argument is not a probability vector
        DivergenceError: If `p_i > 0` where `q_i = 0`
    """
    if p.shape != q.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    support = p > 0
    if np.any(q[support] == 0):
        raise DivergenceError("KL divergence is infinite (q = 0 where p > 0)")
    value = float(np.sum(p[support] * np.log(p[support] / q[support])))
    return max(value, 0.0)


def cross_entropy(probs: Tensor, label: int) -> float:
    """Negative log probability of `label`, floored at `1e-12`.

    Raises:
        LabelIndexError: If `label` is outside `[0, C)`
    """
    if not 0 <= label < probs.shape[-1]:
        raise LabelIndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(float(probs[label]), PROB_FLOOR))) + 0.0


def finite_diff_grad(
    f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5
) -> Tensor:
    """Central difference gradient `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.

    Raises:
        ParameterError: If `eps <= 0`
        NumericError: If `f` evaluates to a non-finite value
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        upper = f(x)
        flat[i] = original - eps
        lower = f(x)
        flat[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        out[i] = (upper - lower) / (2 * eps)
    return grad


def relative_error(actual: Tensor, expected: Tensor) -> float:
    """Max absolute deviation scaled by the larger of the two max magnitudes."""
    scale = max(float(np.max(np.abs(actual))), float(np.max(np.abs(expected))), 1e-12)
    return float(np.max(np.abs(actual - expected))) / scale


def fan_in(shape: Sequence[int]) -> int:
    """Inputs feeding one output unit of a `[out, in, ...]` weight."""
    size = 1
    for dim in shape[1:]:
        size *= dim
    return size


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> Dict[str, Tensor]:
    """Initialise all parameters of a network.

    Weights are drawn layer by layer from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`,
    biases are zero. Parameters are named `<layer index>.weight` and
    `<layer index>.bias`.

    Args:
        spec: The network specification
        rng: The random generator (fully determines the result)

    Returns:
        The parameter tensors in layer order
    """
    params: Dict[str, Tensor] = {}
    for i in spec.weighted_layers():
        layer = spec.layers[i]
        if layer.kind == "conv2d":
            shape: Tuple[int, ...] = (
                layer.out_channels,
                layer.in_channels,
                layer.kernel_size,
                layer.kernel_size,
            )
            out = layer.out_channels
        else:
            shape = (layer.out_features, layer.in_features)
            out = layer.out_features
        bound = np.sqrt(1.0 / fan_in(shape))
        params[f"{i}.weight"] = rng.uniform(-bound, bound, size=shape)
        params[f"{i}.bias"] = np.zeros(out, dtype=DTYPE)
    return params
