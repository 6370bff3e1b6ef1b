"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Parameter], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Parameter], state: AdamState) -> AdamState:
    """Apply one in-place Adam update to every parameter holding a gradient.

    Parameters without a gradient (unreachable from the loss) are left alone,
    but the shared step counter still advances.
    """
    missing = [name for name in params if name not in state.m]
    if missing:
        raise KeyError(f"Adam state not initialized for parameters: {missing[:3]}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= (state.lr * update).astype(p.data.dtype)
    return state
