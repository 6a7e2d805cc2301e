"""Finite-difference validation of tape gradients.

Checks run in float64: the inputs are promoted and numpy promotion carries
the rest of the pipeline along, which keeps central differences tight
enough for a 1e-4 relative tolerance.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractViolation, GradientTape, NonFiniteError, Tensor

__all__ = ["finite_diff_check"]


def finite_diff_check(f: Callable[..., Tensor], points: Sequence[np.ndarray],
                      h: float = 1e-3) -> float:
    """Max relative error between tape gradients of `f` and central differences.

    `f` takes one Tensor per entry of `points` and returns a scalar Tensor.
    Error per coordinate is |analytic - fd| / (|analytic| + 1e-8); the max
    over all coordinates of all inputs is returned.
    """
    params = [Tensor(np.asarray(p, dtype=np.float64), requires_grad=True, dtype=np.float64)
              for p in points]
    with GradientTape() as tape:
        loss = f(*params)
    if loss.data.ndim != 0:
        raise ContractViolation("finite_diff_check: f must return a scalar")
    if tape.contains(loss):
        tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def eval_at(values: list[np.ndarray]) -> float:
        args = [Tensor(v, requires_grad=False, dtype=np.float64) for v in values]
        out = f(*args)
        val = float(out.data)
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff_check: non-finite value at probe point")
        return val

    worst = 0.0
    base = [p.data.copy() for p in params]
    for pi, point in enumerate(base):
        flat = point.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = eval_at(base)
            flat[j] = orig - h
            down = eval_at(base)
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            a = analytic[pi].reshape(-1)[j]
            err = abs(a - fd) / (abs(a) + 1e-8)
            if err > worst:
                worst = err
    return worst
