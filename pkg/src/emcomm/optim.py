"""Adam and global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor

DEFAULT_LR = 3e-4
DEFAULT_EPS = 1e-3
DEFAULT_MAX_NORM = 2500.0


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = DEFAULT_LR
    eps: float = DEFAULT_EPS
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[Sequence[Tensor], AdamState]:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Raises FloatingPointError, leaving parameters and moments untouched, if
    any gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state lengths differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad {i} shape {g.shape} != param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            name = p.name or f"#{i}"
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v) / np.sqrt(bc2) + state.eps
        p.data -= (state.lr / bc1) * m / denom
    return params, state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = DEFAULT_MAX_NORM) -> list[np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]
