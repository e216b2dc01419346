"""A small dense-network core: forward pass, exact reverse-mode gradients, Adam.

Parameters live in one flat vector; each layer's weight and bias are views
into it, so the optimizer works on a single array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, StaleTapeError


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS = ("tanh", "silu")


def _act(name, z):
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    s = _sigmoid(z)
    return z * s, s * (1.0 + z * (1.0 - s))


class Network:
    """Dense layers with a smooth hidden activation and a linear output layer."""

    def __init__(self, sizes: Sequence[int], activation: str = "silu", dtype=np.float64, seed: int = 0):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ShapeError(f"bad layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self._shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        n = sum(o * i + o for o, i in self._shapes)
        self.params = np.zeros(n, dtype=self.dtype)
        self._version = 0
        self._tape = None
        self._bind()
        self.init_params(seed)

    def _bind(self):
        self.layers = []
        k = 0
        for o, i in self._shapes:
            w = self.params[k:k + o * i].reshape(o, i)
            k += o * i
            b = self.params[k:k + o]
            k += o
            self.layers.append((w, b))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return self.params.size

    def init_params(self, seed: int):
        # fan-in scaled uniform
        rng = np.random.default_rng(seed)
        for w, b in self.layers:
            bound = 1.0 / np.sqrt(w.shape[1])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        self._touch()

    def set_params(self, values):
        values = np.asarray(values)
        if values.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.shape} parameters, got {values.shape}")
        self.params[...] = values
        self._touch()

    def _touch(self):
        self._version += 1
        self._tape = None

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.sizes = self.sizes
        other.activation = self.activation
        other.dtype = self.dtype
        other._shapes = list(self._shapes)
        other.params = self.params.copy()
        other._version = 0
        other._tape = None
        other._bind()
        return other

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        inputs, derivs = [], []
        h = x
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            inputs.append(h)
            z = h @ w.T + b
            if k < last:
                h, d = _act(self.activation, z)
                derivs.append(d)
            else:
                h = z
        self._tape = (self._version, inputs, derivs, squeeze)
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, cotangent) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(cotangent * output)`` w.r.t. parameters and input."""
        if self._tape is None or self._tape[0] != self._version:
            raise StaleTapeError("backward needs a forward pass with the current parameters")
        _, inputs, derivs, squeeze = self._tape
        g = np.asarray(cotangent, dtype=self.dtype)
        if squeeze:
            g = g[None, :]
        if g.shape != (inputs[0].shape[0], self.out_dim):
            raise ShapeError(f"cotangent shape {g.shape} does not match output")
        grad = np.zeros_like(self.params)
        views = []
        k = 0
        for o, i in self._shapes:
            views.append((grad[k:k + o * i].reshape(o, i), grad[k + o * i:k + o * i + o]))
            k += o * i + o
        for k in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[k]
            gw, gb = views[k]
            gw[...] = g.T @ inputs[k]
            gb[...] = g.sum(axis=0)
            g = g @ w
            if k > 0:
                g = g * derivs[k - 1]
        return grad, (g[0] if squeeze else g)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros_like(params), np.zeros_like(params), 0, lr, beta1, beta2, eps)


def adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns new parameters, mutates ``state``."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ShapeError("parameter, gradient and moment shapes differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    return params - (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)


def time_embed(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]`` at geometric frequencies.

    ``t`` may be a scalar or a 1-D array; the result has a trailing axis of
    length ``dim``.
    """
    if dim < 2 or dim % 2:
        raise ShapeError("embedding dimension must be a positive even number")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"timestep outside [0, {T}]")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
