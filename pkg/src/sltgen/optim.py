"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np


class NonFiniteGradientError(ValueError):
    """A gradient handed to the optimizer contained NaN or infinity."""


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, shape, beta1: float = 0.5, beta2: float = 0.999,
              epsilon: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(shape, dtype=np.float64),
                   v=np.zeros(shape, dtype=np.float64),
                   beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray,
              lr: float) -> np.ndarray:
    """One bias-corrected Adam update, applied to `param` in place.

    With zeroed accumulators the first step moves by roughly
    -lr * sign(grad); a zero gradient leaves the parameter untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(
            f"adam_step: gradient shape {grad.shape} does not match "
            f"parameter shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            "adam_step: gradient contains non-finite entries")
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from lr0 down to lr_min over total_steps."""

    lr0: float
    total_steps: int
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("CosineSchedule: total_steps must be >= 1")
        if self.lr0 < self.lr_min:
            raise ValueError("CosineSchedule: lr0 must be >= lr_min")


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    """Learning rate at step t; steps past the horizon clamp to lr_min."""
    if t < 0:
        raise ValueError("cosine_lr: negative step")
    if t >= schedule.total_steps:
        return schedule.lr_min
    span = schedule.lr0 - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (
        1.0 + math.cos(math.pi * t / schedule.total_steps))
