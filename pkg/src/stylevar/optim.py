from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    """Moments keyed by parameter name, plus the shared step counter."""

    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self, names: Sequence[str]) -> None:
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)


def adamw_step(params: Dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Every parameter in ``params`` must carry a gradient. Bias correction uses
    the shared step counter, so moments of parameters that were reset (fresh
    adapters after a merge) restart from zero but are corrected with the
    global count; acceptable for the short toy runs this drives.
    """
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adamw_step: missing gradient for {missing[:3]}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads: List[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
