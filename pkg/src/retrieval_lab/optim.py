"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> AdamState:
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One Adam step, in place on ``params`` and ``state``.

    Weight decay is decoupled from the adaptive step: each parameter is first
    shrunk by ``1 - lr * weight_decay`` and then moved by the bias-corrected
    Adam direction.  Missing gradients count as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer state shape {m.shape} != parameter shape {p.data.shape} for {name!r}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        m *= dt.type(beta1)
        m += dt.type(1.0 - beta1) * g
        v *= dt.type(beta2)
        v += dt.type(1.0 - beta2) * (g * g)
        if weight_decay:
            p.data *= dt.type(1.0 - lr * weight_decay)
        mhat = m / dt.type(bc1)
        vhat = v / dt.type(bc2)
        p.data -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))
    return state
