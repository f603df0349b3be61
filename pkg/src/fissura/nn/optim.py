"""Adam and the step-halving learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ParameterError


@dataclass
class AdamState:
    """First/second moment estimates keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, g in grads.items():
        p = params[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-3
    halving_period: int = 5

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ParameterError("initial_lr must be positive")
        if self.halving_period < 1:
            raise ParameterError("halving_period must be >= 1")


def lr_at(epoch: int, schedule: LrSchedule = LrSchedule()) -> float:
    """Learning rate for a zero-based epoch index."""
    return schedule.initial_lr * 0.5 ** (epoch // schedule.halving_period)
