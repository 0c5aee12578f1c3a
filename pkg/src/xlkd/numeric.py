"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps an ndarray, every
operation records its inputs and a backward closure, and ``Tensor.backward``
replays the recorded operations in exact reverse construction order,
accumulating gradients additively (a value consumed twice receives the sum
of both contributions).

Training runs in float32; tests switch to float64 through ``float64_mode``
so finite-difference checks stay tight. Arguments of ``log`` and division
denominators are clamped at ``EPS_FLOOR`` because the distillation loss
takes log-ratios of probabilities that can underflow.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_FLOOR = 1e-12

_DEFAULT_DTYPE = np.float32
_ORDER = itertools.count()


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class GradientCheckError(RuntimeError):
    """Raised when a finite-difference check hits non-finite values."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def float64_mode():
    """Run the enclosed computation with float64 tensor creation."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    """A dense array plus an optional gradient of identical shape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_order")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._order = next(_ORDER)

    @classmethod
    def _result(cls, values: np.ndarray, parents: tuple["Tensor", ...],
                backward_fn: Callable[[np.ndarray], None] | None) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward_fn = backward_fn if out.requires_grad else None
        out._order = next(_ORDER)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.values.size != 1:
            raise ShapeError("backward: root must be scalar, got shape %r" % (self.shape,))
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._order, reverse=True)
        _accumulate(self, np.ones_like(self.values))
        for node in nodes:
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # ---- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.values, b.values)
    out_values = a.values + b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._result(out_values, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.values, b.values)
    out_values = a.values - b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return Tensor._result(out_values, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward_fn(g):
        _accumulate(a, -g)

    return Tensor._result(-a.values, (a,), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.values, b.values)
    out_values = a.values * b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return Tensor._result(out_values, (a, b), backward_fn)


def _clamp_denominator(v: np.ndarray) -> np.ndarray:
    sign = np.where(v < 0, -1.0, 1.0).astype(v.dtype)
    return sign * np.maximum(np.abs(v), EPS_FLOOR)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.values, b.values)
    denom = _clamp_denominator(b.values)
    out_values = a.values / denom

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / denom, a.shape))
        _accumulate(b, _unbroadcast(-g * a.values / (denom * denom), b.shape))

    return Tensor._result(out_values, (a, b), backward_fn)


# ---- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 1 or b.values.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 1-D/2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out_values = a.values @ b.values

    def backward_fn(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return Tensor._result(out_values, (a, b), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out_values = table.values[ids]

    def backward_fn(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.values)
        np.add.at(table.grad, ids, g)

    return Tensor._result(out_values, (table,), backward_fn)


# ---- nonlinearities ------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.maximum(a.values, 0)

    def backward_fn(g):
        _accumulate(a, g * (a.values > 0))

    return Tensor._result(out_values, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    out_values = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                          np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v)))).astype(v.dtype)

    def backward_fn(g):
        _accumulate(a, g * out_values * (1.0 - out_values))

    return Tensor._result(out_values, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.tanh(a.values)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - out_values * out_values))

    return Tensor._result(out_values, (a,), backward_fn)


def log(a) -> Tensor:
    a = _as_tensor(a)
    clamped = np.maximum(a.values, EPS_FLOOR)
    out_values = np.log(clamped)

    def backward_fn(g):
        _accumulate(a, g / clamped)

    return Tensor._result(out_values, (a,), backward_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_values).sum(axis=axis, keepdims=True)
        _accumulate(a, out_values * (g - inner))

    return Tensor._result(out_values, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_values = shifted - lse
    soft = np.exp(out_values)

    def backward_fn(g):
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out_values, (a,), backward_fn)


# ---- shape ops -----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return Tensor._result(out_values, (a,), backward_fn)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out_values = a.values.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return Tensor._result(out_values, (a,), backward_fn)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    out_values = np.concatenate([t.values for t in ts], axis=axis)
    extents = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + extents)

    def backward_fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return Tensor._result(out_values, tuple(ts), backward_fn)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range "
                         f"for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, start + length)
    out_values = a.values[tuple(idx)].copy()

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        a.grad[tuple(idx)] += g

    return Tensor._result(out_values, (a,), backward_fn)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return Tensor._result(out_values, (a,), backward_fn)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size if axis is None else a.shape[axis]

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape).copy())

    return Tensor._result(out_values, (a,), backward_fn)


def gather_rows(a, idx) -> Tensor:
    """Per-batch time gather: out[b, w] = a[b, idx[b, w]] for a of shape (B, T, C)."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if a.values.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: expected (B,T,C) and (B,W), got {a.shape} and {idx.shape}")
    b_idx = np.arange(a.shape[0])[:, None]
    out_values = a.values[b_idx, idx]

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad, (b_idx, idx), g)

    return Tensor._result(out_values, (a,), backward_fn)


def gather_classes(a, idx) -> Tensor:
    """Pick one scalar along the last axis: out[...] = a[..., idx[...]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_classes: index shape {idx.shape} must match {a.shape[:-1]}")
    lead = np.ix_(*(np.arange(n) for n in idx.shape)) if idx.ndim else ()
    out_values = a.values[lead + (idx,)] if idx.ndim else a.values[idx]

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad, lead + (idx,) if idx.ndim else (idx,), g)

    return Tensor._result(out_values, (a,), backward_fn)


def max_over_time(a) -> Tensor:
    """Max-pool over the time axis of a (B, T, C) tensor; ties go to the earliest step."""
    a = _as_tensor(a)
    if a.values.ndim != 3:
        raise ShapeError(f"max_over_time: expected (B,T,C), got {a.shape}")
    arg = a.values.argmax(axis=1)
    b_idx = np.arange(a.shape[0])[:, None]
    c_idx = np.arange(a.shape[2])[None, :]
    out_values = a.values[b_idx, arg, c_idx]

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad, (b_idx, arg, c_idx), g)

    return Tensor._result(out_values, (a,), backward_fn)


def conv1d(a, w, dilation: int = 1) -> Tensor:
    """Same-padded 1-D convolution over (B, T, Cin) with kernel (K, Cin, Cout)."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.values.ndim != 3 or w.values.ndim != 3:
        raise ShapeError(f"conv1d: expected (B,T,Cin) and (K,Cin,Cout), got {a.shape} and {w.shape}")
    if a.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch, input {a.shape[2]} vs kernel {w.shape[1]}")
    batch, steps, _ = a.shape
    k = w.shape[0]
    span = (k - 1) * dilation
    left = span // 2
    padded = np.pad(a.values, ((0, 0), (left, span - left), (0, 0)))
    pos = np.arange(steps)[:, None] + np.arange(k)[None, :] * dilation
    windows = padded[:, pos, :]  # (B, T, K, Cin)
    out_values = np.einsum("btkc,kco->bto", windows, w.values)

    def backward_fn(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("btkc,bto->kco", windows, g))
        if a.requires_grad:
            g_windows = np.einsum("bto,kco->btkc", g, w.values)
            g_padded = np.zeros_like(padded)
            np.add.at(g_padded, (np.arange(batch)[:, None, None], pos[None, :, :]), g_windows)
            _accumulate(a, g_padded[:, left:left + steps, :])

    return Tensor._result(out_values, (a, w), backward_fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(f"layer_norm: gain/bias must have shape {a.shape[-1:]}")
    mu = a.values.mean(axis=-1, keepdims=True)
    centered = a.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_values = gain.values * xhat + bias.values

    def backward_fn(g):
        lead_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead_axes))
        _accumulate(bias, g.sum(axis=lead_axes))
        if a.requires_grad:
            gx = g * gain.values
            term1 = gx.mean(axis=-1, keepdims=True)
            term2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (gx - term1 - xhat * term2))

    return Tensor._result(out_values, (a, gain, bias), backward_fn)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout in train mode; the exact identity in eval mode."""
    a = _as_tensor(a)
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: train mode requires an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.values.dtype) / (1.0 - rate)
    out_values = a.values * keep

    def backward_fn(g):
        _accumulate(a, g * keep)

    return Tensor._result(out_values, (a,), backward_fn)


# ---- verification harness ------------------------------------------------

def gradient_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map one tensor to a scalar tensor. The check runs in float64;
    any non-finite analytic or numeric value raises ``GradientCheckError``
    naming the offending coordinate.
    """
    with float64_mode():
        base = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
        x = Tensor(base.copy(), requires_grad=True)
        out = fn(x)
        if out.size != 1:
            raise ShapeError("gradient_check: fn must return a scalar")
        out.backward()
        analytic = np.zeros_like(base) if x.grad is None else x.grad.copy()

        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(Tensor(base.copy())).item()
            flat[i] = orig - step
            lo = fn(Tensor(base.copy())).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)

        return max_relative_error(analytic, numeric)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic).reshape(-1), np.asarray(numeric).reshape(-1)
    bad = ~(np.isfinite(a) & np.isfinite(n))
    if bad.any():
        raise GradientCheckError(f"non-finite gradient at coordinate {int(np.flatnonzero(bad)[0])}")
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def gradient_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                          step: float = 1e-5) -> float:
    """Finite-difference check of every named parameter against one backward pass.

    ``loss_fn`` rebuilds the graph from the live ``params`` tensors, which must
    already be float64. Returns the worst relative error over all coordinates.
    """
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    out.backward()
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad
        flat = p.values.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        try:
            err = max_relative_error(analytic.reshape(-1), numeric)
        except GradientCheckError as exc:
            raise GradientCheckError(f"{name}: {exc}") from None
        worst = max(worst, err)
    return worst
