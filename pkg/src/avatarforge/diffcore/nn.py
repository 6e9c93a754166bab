"""Small dense networks over the parameter store."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .tensor import Tensor


def _activation(name: str):
    if name == "softplus":
        return lambda x: T.softplus(x, beta=100.0)
    if name == "leaky_relu":
        return lambda x: T.leaky_relu(x, 0.01)
    if name == "relu":
        return T.relu
    if name == "tanh":
        return T.tanh
    if name == "none":
        return lambda x: x
    raise ValueError(f"unknown activation '{name}'")


class DenseNet:
    """MLP with optional input re-concatenation (skip) layers.

    Parameters live in the store under '<prefix>.w<i>' / '<prefix>.b<i>'.
    `sizes` runs input -> hidden... -> output; `skip_at` lists hidden layer
    indices whose input is [h, x] / sqrt(2).
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        sizes,
        activation: str = "leaky_relu",
        skip_at=(),
        rng=None,
        final_zero: bool = False,
        final_bias: float = 0.0,
    ):
        rng = rng or np.random.default_rng(0)
        self.prefix = prefix
        self.sizes = list(sizes)
        self.skip_at = tuple(skip_at)
        self.act = _activation(activation)
        self.n_layers = len(sizes) - 1
        self.weights = []
        self.biases = []
        in_dim0 = sizes[0]
        for i in range(self.n_layers):
            fan_in = sizes[i] + (in_dim0 if i in self.skip_at else 0)
            fan_out = sizes[i + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(np.float32)
            b = np.zeros(fan_out, dtype=np.float32)
            if final_zero and i == self.n_layers - 1:
                w[:] = 0.0
                b[:] = final_bias
            self.weights.append(store.add(f"{prefix}.w{i}", Tensor(w)))
            self.biases.append(store.add(f"{prefix}.b{i}", Tensor(b)))

    @classmethod
    def bind(cls, store: ParamStore, prefix: str, sizes, activation="leaky_relu", skip_at=()):
        """Attach to parameters already present in the store (checkpoint load)."""
        net = cls.__new__(cls)
        net.prefix = prefix
        net.sizes = list(sizes)
        net.skip_at = tuple(skip_at)
        net.act = _activation(activation)
        net.n_layers = len(sizes) - 1
        net.weights = [store[f"{prefix}.w{i}"] for i in range(net.n_layers)]
        net.biases = [store[f"{prefix}.b{i}"] for i in range(net.n_layers)]
        return net

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        inv_sqrt2 = None
        for i in range(self.n_layers):
            if i in self.skip_at:
                if inv_sqrt2 is None:
                    inv_sqrt2 = T.constant(1.0 / np.sqrt(2.0), x)
                h = T.mul(T.concatenate([h, x], axis=-1), inv_sqrt2)
            h = T.linear(h, self.weights[i], self.biases[i])
            if i < self.n_layers - 1:
                h = self.act(h)
        return h
