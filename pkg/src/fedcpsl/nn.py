"""Dense feed-forward classifier on a flat parameter vector.

Parameters of every layer are packed into one float64 array, weights first
(row-major, ``fan_in x fan_out``) followed by the bias, layer after layer.
The network maps a ``B x S`` input matrix to a ``B x C`` matrix of class
probabilities through affine layers, a hidden nonlinearity and a final
softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12
ACTIVATIONS = ("tanh", "relu")


class ShapeError(ValueError):
    """Raised when arrays do not agree with a :class:`ModelSpec`."""


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output dimension")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dimensions must be positive, got {dims}")
        if dims[-1] < 2:
            raise ValueError("the output layer needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat vector into ``(W, b)`` views, one pair per layer."""
        params = np.asarray(params)
        if params.ndim != 1 or params.shape[0] != self.n_params:
            raise ShapeError(f"expected a flat vector of {self.n_params} parameters, got shape {params.shape}")
        layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset:offset + fan_out]
            offset += fan_out
            layers.append((w, b))
        return layers


def default_spec(n_inputs: int, n_classes: int, hidden: int = 32, activation: str = "tanh") -> ModelSpec:
    return ModelSpec((n_inputs, hidden, n_classes), activation)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-a, a, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(z.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_inputs(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != spec.n_inputs:
        raise ShapeError(
            f"layer 0 expects inputs of shape (B, {spec.n_inputs}), got {inputs.shape}"
        )
    return inputs


def _forward_cache(spec, params, inputs):
    inputs = _check_inputs(spec, inputs)
    layers = spec.unpack(params)
    pre, post = [], [inputs]
    a = inputs
    for k, (w, b) in enumerate(layers):
        z = a @ w + b
        if k < len(layers) - 1:
            pre.append(z)
            a = _act(spec.activation, z)
            post.append(a)
        else:
            logits = z
    return layers, pre, post, softmax(logits)


def forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities ``h(params; inputs)``, one row per input."""
    return _forward_cache(spec, params, inputs)[3]


def backprop(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(output_grad * forward(spec, params, inputs))`` w.r.t. ``params``."""
    layers, pre, post, probs = _forward_cache(spec, params, inputs)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != probs.shape:
        raise ShapeError(f"output_grad has shape {output_grad.shape}, outputs have shape {probs.shape}")
    # softmax Jacobian-vector product
    delta = probs * (output_grad - np.sum(output_grad * probs, axis=1, keepdims=True))
    grads = [None] * (2 * len(layers))
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads[2 * k] = np.ravel(post[k].T @ delta)
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ w.T) * _act_grad(spec.activation, pre[k - 1], post[k])
    return np.concatenate(grads)


def finite_diff_grad(fn: Callable[[np.ndarray], float], params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for j in range(params.size):
        orig = params[j]
        params[j] = orig + step
        up = fn(params)
        params[j] = orig - step
        down = fn(params)
        params[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value while perturbing coordinate {j}")
        grad[j] = (up - down) / (2.0 * step)
    return grad
