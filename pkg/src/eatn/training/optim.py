"""Adam and SGD-with-momentum over a ``name -> Tensor`` parameter dict.

Updates are applied in place to ``Tensor.data``.  Optimizer state is keyed by
parameter name so it can be serialized next to a checkpoint.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.kind!r}", "optimizer.kind")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}", "optimizer.lr")


def adam_step(params, grads, state, lr=None):
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.data.shape}")
        m, v = state.moments.get(name) or (np.zeros_like(g), np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.moments[name] = (m, v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def sgd_step(params, grads, state, lr=None):
    lr = state.lr if lr is None else lr
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf = state.moments.get(name)
        buf = g.copy() if buf is None else state.momentum * buf + g
        state.moments[name] = buf
        p.data -= lr * buf
    return params, state


def optimizer_step(params, grads, state, lr=None):
    step = adam_step if state.kind == "adam" else sgd_step
    return step(params, grads, state, lr)
