"""Nadam: Adam moments with a Nesterov-style look-ahead on the first moment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Parameter


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.parameter = name


@dataclass
class NadamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def nadam_step(params: list[Parameter], grads: dict[str, np.ndarray], state: NadamState,
               lr: float) -> None:
    """One in-place update of every trainable parameter.

    theta -= lr * (b1 * m_hat + (1 - b1) * g / (1 - b1^t)) / (sqrt(v_hat) + eps)
    """
    for p in params:
        g = grads.get(p.name)
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradientError(p.name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        if state.m[p.name].shape != p.shape:
            raise ValueError(f"optimizer state for {p.name!r} has shape {state.m[p.name].shape}, "
                             f"parameter has {p.shape}")
        m = state.m[p.name] = b1 * state.m[p.name] + (1 - b1) * g
        v = state.v[p.name] = b2 * state.v[p.name] + (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        update = lr * (b1 * m_hat + (1 - b1) * g / c1) / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


class Nadam:
    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-7):
        self.params = [p for p in params if p.trainable]
        self.state = NadamState(beta1, beta2, eps)

    def step(self, lr: float) -> None:
        grads = {p.name: p.grad for p in self.params if p.grad is not None}
        nadam_step(self.params, grads, self.state, lr)
