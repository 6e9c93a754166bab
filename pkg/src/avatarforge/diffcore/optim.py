"""Named parameter store and Adam with exponential learning-rate falloff."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    """adam_step called while trainable parameters have no gradient."""


@dataclass
class OptimConfig:
    learning_rate: float = 5e-4
    decay: float = 1.0  # per-step exponential falloff factor
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")


def effective_lr(config: OptimConfig, step: int) -> float:
    return config.learning_rate * config.decay**step


class ParamStore:
    """Map name -> trainable Tensor plus per-parameter Adam state.

    Single-writer: all mutation goes through add/adam_step/zero_grad.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter '{name}' already registered")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float32))
        t.requires_grad = trainable
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def trainable_names(self):
        return [n for n, p in self.params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name, p in self.params.items():
            if name.startswith(prefix):
                p.requires_grad = trainable


def adam_step(store: ParamStore, config: OptimConfig) -> ParamStore:
    """One Adam update with bias correction on every trainable parameter.

    Effective learning rate is learning_rate * decay**step, evaluated at each
    parameter's current step count before it is incremented.
    """
    missing = [n for n in store.trainable_names() if store.params[n].grad is None]
    if missing:
        raise MissingGradientError("missing gradients for: " + ", ".join(sorted(missing)))
    for name in store.trainable_names():
        p = store.params[name]
        g = p.grad.data
        if g.shape != p.data.shape:
            raise MissingGradientError(f"gradient shape mismatch for '{name}'")
        lr = effective_lr(config, store.steps[name])
        m = store.m[name]
        v = store.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        t = store.steps[name] + 1
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.data.dtype)
        store.steps[name] = t
    return store
