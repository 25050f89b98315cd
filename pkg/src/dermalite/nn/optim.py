"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Update ``params`` in place, visiting tensors in ``params`` order."""
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
