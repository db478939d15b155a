"""Adam (gradient ascent), gradient hygiene and the learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float):
    """One bias-corrected Adam step in the ascent direction.

    Returns ``(theta_next, state_next)``; inputs are not modified.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not (theta.shape == grad.shape == state.m.shape):
        raise ValueError(f"length mismatch: theta {theta.shape}, grad {grad.shape}, "
                         f"state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    theta_next = theta + lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return theta_next, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def sanitize_gradient(grad: np.ndarray, clip: float | None) -> tuple[np.ndarray, int]:
    """Zero non-finite entries, then rescale to global norm <= clip.

    Returns the cleaned gradient and the number of entries that were zeroed.
    """
    grad = np.array(grad, dtype=float)
    bad = ~np.isfinite(grad)
    n_bad = int(bad.sum())
    grad[bad] = 0.0
    if clip is not None and clip > 0:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad *= clip / norm
    return grad, n_bad


@dataclass(frozen=True)
class LrSchedule:
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    total_generations: int = 200

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.total_generations < 1:
            raise ValueError("total_generations must be >= 1")


def lr_at(schedule: LrSchedule, generation: int) -> float:
    """Geometric interpolation from lr_start (first) to lr_end (last generation)."""
    n = schedule.total_generations
    if not 0 <= generation < n:
        raise ValueError(f"generation {generation} outside [0, {n})")
    if n == 1:
        return schedule.lr_start
    if generation == n - 1:
        return schedule.lr_end
    frac = generation / (n - 1)
    return schedule.lr_start * (schedule.lr_end / schedule.lr_start) ** frac
