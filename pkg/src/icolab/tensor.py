"""Dense tensors with reverse-mode automatic differentiation.

A small tape-based engine over numpy arrays: kernels compute the forward
value eagerly and, when a `GradientTape` is active and an input requires
gradients, register a backward rule on the tape. Replaying the tape in
reverse order (execution order is already topological) accumulates
gradients into every tensor with `requires_grad=True`; frozen tensors never
receive a gradient buffer.

Precision policy: user-facing tensors default to float32. Kernels follow
numpy promotion, so evaluating a function on float64 inputs runs the whole
pipeline in float64; the finite-difference checker relies on this.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "NonFiniteError",
    "Tensor",
    "GradientTape",
    "backward",
    "tensor",
    "matmul",
    "add",
    "mul",
    "scale",
    "softmax",
    "rmsnorm",
    "gelu",
    "embedding_lookup",
    "cross_entropy",
    "concat",
    "masked_fill",
    "reshape",
    "transpose",
    "index_select",
    "sum_all",
    "mean_all",
    "rope",
    "MASK_FILL_VALUE",
]

# Large finite negative; exp() underflows to exactly 0.0 so masked positions
# get exactly zero attention weight while every element stays finite.
MASK_FILL_VALUE = -1e30

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ContractViolation(ValueError):
    """A kernel precondition (shape, index range, argument domain) was broken."""


class NonFiniteError(ArithmeticError):
    """A kernel produced NaN or Inf; the message names the kernel."""


class Tensor:
    """Dense n-dimensional array participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self, requires_grad: Optional[bool] = None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data.copy()
        out.requires_grad = self.requires_grad if requires_grad is None else bool(requires_grad)
        out.grad = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of operations; reverse replay yields gradients.

    Use as a context manager around the forward computation, then call
    `backward(loss)`. Replay resets all gradients on the tape first, so
    repeated backward calls over the same tape are bit-identical.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractViolation("gradient tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def contains(self, t: Tensor) -> bool:
        return any(node.out is t for node in self._nodes)

    def _record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self._nodes.append(_Node(out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise ContractViolation(f"backward requires a scalar loss, got shape {loss.shape}")
        on_tape = {id(node.out) for node in self._nodes}
        if id(loss) not in on_tape:
            raise ContractViolation("loss tensor was not produced on this tape")

        for node in self._nodes:
            node.out.grad = None
            for t in node.inputs:
                t.grad = None
        loss.grad = np.ones((), dtype=loss.data.dtype)

        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g
                else:
                    # fresh allocation: g (and a previously assigned grad) may
                    # alias another tensor's buffer, so never add in place
                    t.grad = t.grad + g


def backward(loss: Tensor, tape: GradientTape) -> None:
    tape.backward(loss)


def _finish(kernel: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    # single-reduction fast path; the full scan only runs to rule out a
    # finite-but-overflowing sum before raising
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kernel}: non-finite output")
    requires = any(t.requires_grad for t in inputs)
    out = _result(data, requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape._record(out, tuple(inputs), backward_fn)
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


# ---------------------------------------------------------------------------
# Kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. `a` is (..., n, k); `b` is (k, m) or matches a's batch dims."""
    _check(a.data.ndim >= 2 and b.data.ndim >= 2, "matmul: operands must have ndim >= 2")
    _check(a.shape[-1] == b.shape[-2], f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.data.ndim > 2:
        _check(a.shape[:-2] == b.shape[:-2], f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g: np.ndarray):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _finish("matmul", data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add: shapes differ, {a.shape} vs {b.shape}")
    data = a.data + b.data

    def bwd(g: np.ndarray):
        return g, g

    return _finish("add", data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul: shapes differ, {a.shape} vs {b.shape}")
    data = a.data * b.data

    def bwd(g: np.ndarray):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _finish("mul", data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Scalar times tensor; the one sanctioned broadcast."""
    s = float(s)
    data = a.data * a.data.dtype.type(s)

    def bwd(g: np.ndarray):
        return (g * s,)

    return _finish("scale", data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / denom

    def bwd(g: np.ndarray):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _finish("softmax", y, (a,), bwd)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    _check(gain.data.ndim == 1 and gain.shape[0] == x.shape[-1],
           f"rmsnorm: gain shape {gain.shape} does not match feature dim {x.shape[-1]}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = x.data * inv * gain.data

    def bwd(g: np.ndarray):
        gx = ggain = None
        gg = g * gain.data
        if x.requires_grad:
            dot = (gg * x.data).sum(axis=-1, keepdims=True)
            gx = inv * gg - (inv ** 3 / d) * x.data * dot
        if gain.requires_grad:
            ggain = (g * x.data * inv).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _finish("rmsnorm", y, (x, gain), bwd)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + _GELU_A * v2 * v))
    one_plus_t = 1.0 + t
    y = 0.5 * v * one_plus_t
    # derivative computed here so the backward pass is a single multiply
    dy = 0.5 * one_plus_t + 0.5 * v * (1.0 - t * t) * (
        _GELU_C * (1.0 + 3.0 * _GELU_A * v2))

    def bwd(g: np.ndarray):
        return (g * dy,)

    return _finish("gelu", y, (x,), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; ids is an integer array."""
    ids = np.asarray(ids)
    _check(np.issubdtype(ids.dtype, np.integer), "embedding_lookup: ids must be integers")
    vocab, dim = table.shape
    _check(ids.size == 0 or (ids.min() >= 0 and ids.max() < vocab),
           f"embedding_lookup: id out of range [0, {vocab})")
    data = table.data[ids]

    def bwd(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, dim))
        return (gt,)

    return _finish("embedding_lookup", data, (table,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of integer targets under softmax(logits)."""
    targets = np.asarray(targets)
    _check(logits.data.ndim == 2, f"cross_entropy: logits must be 2-d, got {logits.shape}")
    n, vocab = logits.shape
    _check(targets.shape == (n,), f"cross_entropy: targets shape {targets.shape} != ({n},)")
    _check(np.issubdtype(targets.dtype, np.integer), "cross_entropy: targets must be integers")
    _check(targets.size == 0 or (targets.min() >= 0 and targets.max() < vocab),
           f"cross_entropy: target out of range [0, {vocab})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom
    rows = np.arange(n)
    nll = np.log(denom[:, 0]) - z[rows, targets]

    def bwd(g: np.ndarray):
        gl = p * g[:, None]
        gl[rows, targets] -= g
        return (gl,)

    return _finish("cross_entropy", nll, (logits,), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    _check(len(parts) >= 1, "concat: need at least one part")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        _check(len(other) == len(base)
               and all(o == b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)),
               f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bwd(g: np.ndarray):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(s if p.requires_grad else None for p, s in zip(parts, splits))

    return _finish("concat", data, tuple(parts), bwd)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = MASK_FILL_VALUE) -> Tensor:
    """Write `value` where boolean `mask` is True; mask may broadcast over leading axes."""
    mask = np.asarray(mask)
    _check(mask.dtype == np.bool_, "masked_fill: mask must be boolean")
    try:
        mask_b = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ContractViolation(f"masked_fill: mask {mask.shape} not broadcastable to {a.shape}")
    data = np.where(mask_b, a.data.dtype.type(value), a.data)

    def bwd(g: np.ndarray):
        return (np.where(mask_b, 0.0, g),)

    return _finish("masked_fill", data, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        rest = int(np.prod([s for s in shape if s != -1]))
        _check(rest > 0 and a.size % rest == 0,
               f"reshape: cannot infer -1 for {a.shape} -> {shape}")
        shape = tuple(a.size // rest if s == -1 else s for s in shape)
    _check(int(np.prod(shape)) == a.size, f"reshape: {a.shape} -> {shape} changes element count")
    data = a.data.reshape(shape)

    def bwd(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _finish("reshape", data, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    _check(sorted(axes) == list(range(a.data.ndim)), f"transpose: bad axes {axes} for ndim {a.data.ndim}")
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return _finish("transpose", data, (a,), bwd)


def index_select(a: Tensor, idx, axis: int) -> Tensor:
    """Gather slices along `axis` at integer positions `idx` (backward scatter-adds)."""
    idx = np.asarray(idx)
    _check(idx.ndim == 1 and np.issubdtype(idx.dtype, np.integer), "index_select: idx must be 1-d integers")
    extent = a.shape[axis]
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < extent),
           f"index_select: index out of range [0, {extent})")
    data = np.take(a.data, idx, axis=axis)

    def bwd(g: np.ndarray):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _finish("index_select", data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    data = a.data.sum()

    def bwd(g: np.ndarray):
        return (np.broadcast_to(g, a.shape),)

    return _finish("sum_all", np.asarray(data), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    _check(n > 0, "mean_all: empty tensor")
    data = a.data.mean()

    def bwd(g: np.ndarray):
        return (np.broadcast_to(g / n, a.shape),)

    return _finish("mean_all", np.asarray(data), (a,), bwd)


_ROPE_CACHE: dict = {}


def _rope_tables(positions: np.ndarray, half: int, base: float, dtype) -> tuple:
    key = (positions.tobytes(), half, base, np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
        ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
        hit = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
        if len(_ROPE_CACHE) > 512:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = hit
    return hit


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position encoding over the last axis, one position per row.

    `x` is (..., T, d) with d even; rows are rotated by angles derived from
    `positions` (length T). The backward pass applies the inverse rotation.
    """
    positions = np.asarray(positions)
    _check(positions.ndim == 1 and np.issubdtype(positions.dtype, np.integer),
           "rope: positions must be 1-d integers")
    d = x.shape[-1]
    t = x.shape[-2]
    _check(d % 2 == 0, f"rope: feature dim {d} must be even")
    _check(positions.shape[0] == t, f"rope: {positions.shape[0]} positions for {t} rows")
    half = d // 2
    cos, sin = _rope_tables(positions, half, base, x.data.dtype)
    xa = x.data[..., :half]
    xb = x.data[..., half:]
    data = np.concatenate([xa * cos - xb * sin, xb * cos + xa * sin], axis=-1)

    def bwd(g: np.ndarray):
        ga = g[..., :half]
        gb = g[..., half:]
        return (np.concatenate([ga * cos + gb * sin, gb * cos - ga * sin], axis=-1),)

    return _finish("rope", data, (x,), bwd)
