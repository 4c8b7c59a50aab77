"""Spectral normalization with persistent power-iteration vectors."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mul


@dataclass
class SpectralState:
    """Running estimate of the leading left singular vector of one weight."""

    u: np.ndarray
    sigma: float = 1.0

    @classmethod
    def init(cls, rows: int, rng: np.random.Generator) -> "SpectralState":
        u = rng.standard_normal(rows)
        return cls(u=u / np.linalg.norm(u))


def estimate_sigma(w: np.ndarray, state: SpectralState, power_iters: int = 1) -> float:
    u = state.u
    v = w.T @ u
    for _ in range(power_iters):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v = v / nv
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        u = u / nu
    state.u = u
    nv = np.linalg.norm(w.T @ u)
    return float(nv)


def spectral_normalize(
    weight: Tensor, state: SpectralState, power_iters: int = 1, update: bool = True
) -> Tensor:
    """Divide ``weight`` by its estimated largest singular value.

    With ``update`` the estimate is refined by ``power_iters`` steps and
    stored on ``state``; otherwise the stored estimate is reused. The
    estimate is a constant in the backward pass.
    """
    if weight.ndim != 2:
        raise ValueError(f"spectral_normalize expects a matrix, got shape {weight.shape}")
    if update:
        state.sigma = estimate_sigma(weight.data, state, power_iters)
    sigma = state.sigma
    if sigma <= 0 or not np.isfinite(sigma):
        warnings.warn("spectral_normalize: zero matrix left unnormalized", RuntimeWarning, stacklevel=2)
        return mul(weight, 1.0)
    return mul(weight, 1.0 / sigma)
