"""Adam with a cosine learning-rate schedule (no warmup)."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ContractViolation, Tensor

__all__ = ["Adam", "cosine_lr"]


def cosine_lr(lr0: float, t: int, total_steps: int) -> float:
    """lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)); lr(0) = lr0, lr(T) = 0."""
    if total_steps <= 0:
        raise ContractViolation("cosine_lr: total_steps must be positive")
    frac = min(max(t, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Standard Adam over an explicit parameter list.

    The step counter starts at 0 and the learning rate for a step is taken
    at the counter value before the increment, so a run of `total_steps`
    steps sweeps lr0 down toward (but not through) zero.
    """

    def __init__(self, params: list[Tensor], lr0: float, total_steps: int,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr0 <= 0:
            raise ContractViolation("Adam: learning rate must be positive")
        self.params = list(params)
        self.lr0 = float(lr0)
        self.total_steps = int(total_steps)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def current_lr(self) -> float:
        return cosine_lr(self.lr0, self.t, self.total_steps)

    def step(self) -> float:
        """Apply one update using each parameter's populated grad; returns the lr used."""
        lr = self.current_lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractViolation(f"Adam: parameter {i} has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
