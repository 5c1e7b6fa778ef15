from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from utils.errors import TensorShapeError


@dataclass
class AdamState:
    """Bias-corrected Adam. Moments are created lazily per variable name."""
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, grads: Dict[str, np.ndarray], variables: Dict[str, np.ndarray],
              lr: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Return updated copies of `variables`; `state` advances by one step."""
    state.step += 1
    lr = state.lr if lr is None else lr
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name, value in variables.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(value):
            raise TensorShapeError('adam_step', g.shape, np.shape(value), detail=f'variable {name}')
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        updated[name] = np.asarray(value, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warm-up over the first `warmup_steps` updates (step counts from 1)."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)
