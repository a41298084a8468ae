"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: only the operations the models need, all in double
precision, each with a hand-written backward rule that is verified
against central finite differences (see :func:`grad_check`). Graph
recording is skipped whenever no input requires a gradient or when
inside a :class:`no_grad` block, so the same forward code serves both
training and inference.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode pass seeded with d(self)/d(self) = 1. Scalar only."""
        if self.data.size != 1:
            raise DomainError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce an upstream gradient back to a broadcast input's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# Elementwise and linear ops ------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _node(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(data, (a, b), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + w)
                p._accumulate(g[tuple(idx)])
            offset += w

    return _node(data, tuple(parts), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis (used to split attention heads)."""
    a = _as_tensor(a)
    data = a.data[..., start:stop]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            a._accumulate(full)

    return _node(np.ascontiguousarray(data), (a,), backward)


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    data = np.asarray(a.data.mean())

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.shape).copy())

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    return _node(y, (a,), backward)


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _node(y, (a,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup into an embedding matrix, differentiable in the matrix."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            full = np.zeros_like(weight.data)
            np.add.at(full, ids, g)
            weight._accumulate(full)

    return _node(data, (weight,), backward)


# Normalisation and attention primitives -------------------------------


def rms(x: Tensor) -> Tensor:
    """Root-mean-square magnitude of a vector: l2 norm over sqrt(length)."""
    x = _as_tensor(x)
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"rms expects a non-empty vector, got shape {x.shape}")
    d = x.size
    r = math.sqrt(float(np.dot(x.data, x.data)) / d)
    data = np.asarray(r)

    def backward(g):
        if x.requires_grad:
            if r == 0.0:
                x._accumulate(np.zeros_like(x.data))
            else:
                x._accumulate(g * x.data / (d * r))

    return _node(data, (x,), backward)


def rms_rows(x: np.ndarray) -> np.ndarray:
    """Plain-numpy per-row rms of a [T, d] array (no gradient)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.mean(x * x, axis=-1))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """gain * x / sqrt(mean(x^2) + eps), normalising the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    d = x.shape[-1]
    if gain.ndim != 1 or gain.shape[0] != d:
        raise DimensionError(f"rms_norm gain shape {gain.shape} does not match feature dim {d}")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xn = x.data * inv
    data = gain.data * xn

    def backward(g):
        gg = g * gain.data
        if x.requires_grad:
            dot = np.sum(gg * x.data, axis=-1, keepdims=True)
            x._accumulate(inv * gg - (inv ** 3 / d) * dot * x.data)
        if gain.requires_grad:
            gr = g * xn
            gain._accumulate(gr.reshape(-1, d).sum(axis=0))

    return _node(data, (x, gain), backward)


def softmax_row(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly zero.

    ``mask`` is boolean with True marking admitted positions. Every row
    must admit at least one position.
    """
    logits = _as_tensor(logits)
    if mask is None:
        admitted = np.ones(logits.shape, dtype=bool)
    else:
        admitted = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not admitted.any(axis=-1).all():
        raise DomainError("softmax_row: at least one position per row must be unmasked")
    z = np.where(admitted, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(admitted, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            dot = np.sum(g * y, axis=-1, keepdims=True)
            logits._accumulate(y * (g - dot))

    return _node(y, (logits,), backward)


def rope_tables(positions, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for rotary embedding at the given absolute positions."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    ang = positions * freqs
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate interleaved feature pairs of [T, d] by position-dependent angles."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise DimensionError(f"rope requires an even feature dim, got {d}")
    cos, sin = rope_tables(positions, d, base)
    x0, x1 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def backward(g):
        if x.requires_grad:
            g0, g1 = g[..., 0::2], g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = g0 * cos + g1 * sin
            gx[..., 1::2] = -g0 * sin + g1 * cos
            x._accumulate(gx)

    return _node(out, (x,), backward)


def rope_apply_np(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Numpy-only rope for cached keys (same math as :func:`rope`)."""
    x = np.asarray(x, dtype=np.float64)
    cos, sin = rope_tables(positions, x.shape[-1], base)
    if x.ndim == 3:  # [T, heads, d_head]: rotate each head the same way
        cos, sin = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def cross_entropy_soft(logits: Tensor, target_probs: np.ndarray,
                       weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy between logits rows and fixed target distributions.

    ``weights`` selects/weights rows; rows with zero weight contribute
    nothing. Returns 0 when all weights are zero. Targets are constants
    (the frozen teacher), so no gradient flows into them.
    """
    logits = _as_tensor(logits)
    p = np.asarray(target_probs, dtype=np.float64)
    if logits.shape != p.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {p.shape}")
    t = logits.data.reshape(-1, logits.shape[-1])
    p2 = p.reshape(-1, p.shape[-1])
    n_rows = t.shape[0]
    w = np.ones(n_rows) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n_rows:
        raise DimensionError(f"weights {w.shape} vs {n_rows} rows")
    total = float(w.sum())
    denom = total if total > 0 else 1.0
    zmax = t.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(t - zmax).sum(axis=-1, keepdims=True))
    logp = t - lse
    data = np.asarray(-(w * (p2 * logp).sum(axis=-1)).sum() / denom)

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(logp)
            grad = (w[:, None] / denom) * (soft * p2.sum(axis=-1, keepdims=True) - p2)
            logits._accumulate(float(g) * grad.reshape(logits.shape))

    return _node(data, (logits,), backward)


# Gradient verification -------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Worst per-coordinate relative error between reverse-mode and
    central finite differences of the scalar function ``f`` at ``x``."""
    point = Tensor(x.data.copy(), requires_grad=True)
    out = f(point)
    if out.size != 1:
        raise DomainError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise EvaluationError("grad_check: function is non-finite at the base point")
    out.backward()
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

    flat = point.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(point).data)
            flat[i] = orig - h
            fm = float(f(point).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"grad_check: non-finite value near coordinate {i}")
            numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(a - numeric) / denom))


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5) -> float:
    """Run grad_check over each parameter tensor of a zero-arg loss."""
    worst = 0.0
    for p in params:
        original = p.data

        def f(t: Tensor, _p=p) -> Tensor:
            _p.data = t.data
            _p.requires_grad = t.requires_grad
            _p.grad = None
            try:
                return loss_fn()
            finally:
                pass

        err = grad_check(f, p, h)
        p.data = original
        p.requires_grad = True
        p.grad = None
        worst = max(worst, err)
    return worst
