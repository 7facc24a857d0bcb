"""Tiny dense feedforward nets with hand-written backprop.

Everything is float64 numpy. Hidden layers use tanh; the output layer is
linear. Inputs are (batch, features); weight matrices are (out, in).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass
class DenseParams:
    weights: list[np.ndarray]  # layer l: (sizes[l+1], sizes[l])
    biases: list[np.ndarray]  # layer l: (sizes[l+1],)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "DenseParams":
        return DenseParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_dense(layer_sizes: list[int], rng: np.random.Generator) -> DenseParams:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    if len(layer_sizes) < 2:
        raise ParameterError(f"need at least input and output sizes, got {layer_sizes}")
    if any(int(s) < 1 for s in layer_sizes):
        raise ParameterError(f"layer sizes must be positive, got {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return DenseParams(weights, biases)


def zeros_like_dense(params: DenseParams) -> DenseParams:
    return DenseParams(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def dense_forward(params: DenseParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass; returns (output (B, out), per-layer activations).

    The returned cache is [x, a_1, ..., a_L] where a_l is the tanh output
    of hidden layer l and a_L is the linear output.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != params.weights[0].shape[1]:
        raise DimensionError(
            f"input shape {a.shape} does not match first layer fan-in {params.weights[0].shape[1]}"
        )
    cache = [a]
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if l == last else np.tanh(z)
        cache.append(a)
    return a, cache


def dense_backward(
    params: DenseParams, cache: list[np.ndarray], grad_out: np.ndarray
) -> tuple[DenseParams, np.ndarray]:
    """Backprop grad_out (B, out) through the net; returns (param grads,
    gradient with respect to the input (B, in))."""
    grads = zeros_like_dense(params)
    g = np.asarray(grad_out, dtype=np.float64)  # dL/dz of the linear output
    for l in range(params.n_layers - 1, -1, -1):
        grads.weights[l] = g.T @ cache[l]
        grads.biases[l] = g.sum(axis=0)
        g = g @ params.weights[l]
        if l > 0:
            g = g * (1.0 - cache[l] ** 2)  # tanh'
    return grads, g


class MomentumState:
    """Classic SGD-with-momentum over a flat list of parameter arrays."""

    def __init__(self, arrays: list[np.ndarray], learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0.0:
            raise ParameterError(f"learning rate must be positive, got {learning_rate}")
        if not (0.0 <= momentum < 1.0):
            raise ParameterError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = learning_rate
        self.momentum = momentum
        self.velocities = [np.zeros_like(a) for a in arrays]

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray], mask=None) -> None:
        """In-place update; mask (same length, booleans) freezes entries."""
        for i, (a, g, v) in enumerate(zip(arrays, grads, self.velocities)):
            if mask is not None and not mask[i]:
                continue
            v *= self.momentum
            v -= self.lr * g
            a += v
