"""
Dense-tensor kernels for the small networks used by adapt-by-pruning.

Everything here works on float64 numpy arrays in row-major order. Layers are
plain functions: ``layer_forward`` returns the output together with a cache,
and ``layer_backward`` turns that cache and an upstream gradient into exact
reverse-mode gradients.
"""

from dataclasses import dataclass
from enum import StrEnum
from typing import Callable

import numpy as np
from scipy.special import expit

FINITE_DIFFERENCE_STEP = 1e-6


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class ParameterError(ValueError):
    """Raised when a scalar parameter is outside its valid range."""


class StaleCacheError(RuntimeError):
    """Raised when a backward pass is handed a cache it cannot use."""


class Activation(StrEnum):
    IDENTITY = "identity"
    RELU = "relu"


@dataclass(frozen=True)
class LayerCache:
    inputs: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    pre_activation: np.ndarray
    activation: Activation


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the same seed gives the same draws everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(values: object) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product of two rank-2 tensors.

    Raises:
        DimensionError: If either operand is not a matrix or the inner
            dimensions disagree
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise ParameterError(f"Temperature must be positive, got {t}")


def sigmoid(x: np.ndarray, t: float) -> np.ndarray:
    """Elementwise 1 / (1 + exp(-t * x))."""
    _check_temperature(t)
    return expit(t * np.asarray(x, dtype=np.float64))


def sigmoid_grad(x: np.ndarray, t: float) -> np.ndarray:
    """Derivative of ``sigmoid(x, t)`` with respect to x, t * s * (1 - s)."""
    s = sigmoid(x, t)
    return t * s * (1.0 - s)


def _apply_activation(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def layer_forward(
    inputs: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    activation: Activation,
) -> tuple[np.ndarray, LayerCache]:
    """
    Compute ``activation(inputs @ weights + bias)``.

    Args:
        inputs: Batch of rows, shape (n, fan_in)
        weights: Shape (fan_in, fan_out)
        bias: Shape (fan_out,)
        activation: Output nonlinearity

    Returns:
        Tuple of (output, cache for ``layer_backward``)
    """
    if bias.shape != (weights.shape[-1],):
        raise DimensionError(
            f"Bias shape {bias.shape} does not match weights {weights.shape}"
        )
    pre_activation = matmul(inputs, weights) + bias
    cache = LayerCache(
        inputs=inputs,
        weights=weights,
        bias=bias,
        pre_activation=pre_activation,
        activation=Activation(activation),
    )
    return _apply_activation(pre_activation, cache.activation), cache


def layer_backward(
    cache: LayerCache,
    upstream_grad: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Reverse-mode gradients of ``layer_forward``.

    Gradients are summed over the batch; callers fold any averaging into
    ``upstream_grad``.

    Returns:
        Tuple of (grad_input, grad_weights, grad_bias)

    Raises:
        StaleCacheError: If the upstream gradient does not match the cached
            forward pass
    """
    if upstream_grad.shape != cache.pre_activation.shape:
        raise StaleCacheError(
            f"Upstream gradient shape {upstream_grad.shape} does not match "
            f"cached layer output {cache.pre_activation.shape}"
        )
    delta = upstream_grad
    if cache.activation == Activation.RELU:
        delta = upstream_grad * (cache.pre_activation > 0.0)
    grad_weights = cache.inputs.T @ delta
    grad_bias = delta.sum(axis=0)
    grad_input = delta @ cache.weights.T
    return grad_input, grad_weights, grad_bias


def central_difference(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    step: float = FINITE_DIFFERENCE_STEP,
) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function.

    ``x`` is perturbed in place one entry at a time and restored afterwards.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + step
        upper = fn(x)
        flat[k] = original - step
        lower = fn(x)
        flat[k] = original
        out[k] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Largest elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0
