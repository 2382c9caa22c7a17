"""Small feed-forward building blocks with hand-derived backward passes.

Every forward function returns ``(output, cache)`` and has a matching
``*_backward(grad_output, cache)`` that returns gradients with respect to
inputs and parameters.  Gradient containers reuse the parameter dataclasses
so parameter trees and gradient trees always have the same structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def elu(x):
    return np.where(x > 0, x, np.expm1(x))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def identity(x):
    return x


def identity_grad(x):
    return np.ones_like(x)


_ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "elu": (elu, elu_grad),
    "identity": (identity, identity_grad),
}


def sigmoid(z):
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out, probs, axis=-1):
    inner = (grad_out * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_out - inner)


@dataclass
class Mlp:
    """Plain multilayer perceptron parameters; linear output layer.

    ``activation`` applies to hidden layers only.  The same container doubles
    as the gradient holder returned by :func:`mlp_backward`.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "gelu"

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def num_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def init_mlp(rng, dims, activation="gelu"):
    """Fan-in-scaled normal weights, zero biases; ``dims`` lists layer widths."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases, activation=activation)


def mlp_forward(mlp, x):
    act, _ = _ACTIVATIONS[mlp.activation]
    inputs = [x]
    preacts = []
    a = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w + b
        preacts.append(z)
        a = z if i == last else act(z)
        if i != last:
            inputs.append(a)
    return a, (inputs, preacts)


def mlp_backward(mlp, cache, grad_out):
    """Returns ``(grad_x, grads)`` with ``grads`` shaped like ``mlp``."""
    _, act_grad = _ACTIVATIONS[mlp.activation]
    inputs, preacts = cache
    n_layers = len(mlp.weights)
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    delta = grad_out
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            delta = delta * act_grad(preacts[i])
        d_w[i] = inputs[i].T @ delta
        d_b[i] = delta.sum(axis=0)
        delta = delta @ mlp.weights[i].T
    return delta, Mlp(weights=d_w, biases=d_b, activation=mlp.activation)


_LN_EPS = 1e-6


def layer_norm(x):
    """Standardize the last axis (no learnable scale or shift)."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    y = centered * inv_std
    return y, (y, inv_std)


def layer_norm_backward(grad_out, cache):
    y, inv_std = cache
    mean_g = grad_out.mean(axis=-1, keepdims=True)
    mean_gy = (grad_out * y).mean(axis=-1, keepdims=True)
    return inv_std * (grad_out - mean_g - y * mean_gy)
