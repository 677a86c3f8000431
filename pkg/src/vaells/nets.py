"""Fully connected networks with hand-written backprop, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

ACTIVATIONS = ("relu", "identity", "sigmoid")


@dataclass
class MlpSpec:
    layer_sizes: list[int]
    activations: list[str]

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ValueError("need one activation per layer")
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ValueError(f"unknown activations {sorted(bad)}")
        if self.activations[-1] not in ("identity", "sigmoid"):
            raise ValueError("final activation must be identity or sigmoid")

    @classmethod
    def two_layer(cls, n_in: int, hidden: int, n_out: int, output: str = "identity") -> "MlpSpec":
        """Linear -> ReLU -> Linear, the encoder/decoder shape used throughout."""
        return cls([n_in, hidden, n_out], ["relu", output])


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # weights[k] has shape (out, in)
    biases: list[np.ndarray]
    activations: list[str]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in ``[W0, b0, W1, b1, ...]`` order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), list(self.activations))

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_mlp(spec: MlpSpec, rng) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases, list(spec.activations))


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    return a


def mlp_forward(params: MlpParams, x):
    """Run the network on a vector ``(D,)`` or a row batch ``(N, D)``.

    Returns the output and a cache of layer inputs and pre-activations for
    :func:`mlp_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"input dim {x.shape[-1]} != network input {params.input_dim}")
    h = x
    cache = []
    for W, b, name in zip(params.weights, params.biases, params.activations):
        a = h @ W.T + b
        cache.append((h, a))
        h = _act(name, a)
    return h, cache


def mlp_backward(params: MlpParams, cache, output_grad):
    """Backpropagate ``output_grad`` (same shape as the forward output).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
    ``[W0, b0, W1, b1, ...]`` order of :meth:`MlpParams.arrays`.  Batched
    gradients are summed over rows.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if len(cache) != len(params.weights):
        raise DimensionError("cache does not belong to this network")
    if g.shape != cache[-1][1].shape:
        raise DimensionError(f"output_grad shape {g.shape} != output shape {cache[-1][1].shape}")
    grads = [None] * (2 * len(params.weights))
    for k in range(len(params.weights) - 1, -1, -1):
        h, a = cache[k]
        name = params.activations[k]
        if name == "relu":
            g = g * (a > 0)
        elif name == "sigmoid":
            s = _act("sigmoid", a)
            g = g * s * (1.0 - s)
        if g.ndim == 1:
            grads[2 * k] = np.outer(g, h)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = g.T @ h
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k]
    return grads, g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam moments differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch {p.shape} vs grad {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)
