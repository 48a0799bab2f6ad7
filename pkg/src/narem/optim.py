"""Adam with inverse-square-root warmup, plus the training-step contract.

Hyperparameter defaults follow common transformer training practice:
beta1=0.9, beta2=0.98, eps=1e-9, lr = peak * min(step^-0.5, step * warmup^-1.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from narem.autodiff import Tensor


class DivergenceError(RuntimeError):
    """Non-finite gradient or loss encountered during training."""


@dataclass
class AdamState:
    """Optimizer state for one fixed list of parameters."""

    params: list[Tensor]
    peak_lr: float = 1e-3
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def learning_rate(self, step: int) -> float:
        return self.peak_lr * min(step**-0.5, step * self.warmup_steps**-1.5)


def adam_step(state: AdamState) -> None:
    """One bias-corrected Adam update; gradients must already be populated."""
    state.step += 1
    lr = state.learning_rate(state.step)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, p in enumerate(state.params):
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {p.name!r} at step {state.step}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_gradients(params: list[Tensor]) -> None:
    for p in params:
        p.zero_grad()
