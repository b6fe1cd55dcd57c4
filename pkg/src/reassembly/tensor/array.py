"""Reverse-mode autodiff over dense numpy buffers.

Define-by-run: every op returns a new Array holding its inputs and a
closure that routes the output gradient back to them. ``backward`` on a
scalar walks the tape once in reverse topological order.

Broadcasting is restricted to leading-batch alignment: operand shapes
must be equal, scalar, suffixes of each other, or differ only in axes
that are explicitly size 1. Anything else needs an explicit reshape.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Array:
    """A dense float tensor with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if data.dtype not in _FLOAT_DTYPES:
            data = data.astype(np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Array, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Array(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; all semantics live in the module-level functions.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=np.float32) -> Array:
    """A trainable leaf."""
    return Array(np.asarray(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Array:
    a = np.asarray(data)
    if dtype is not None:
        a = a.astype(dtype)
    return Array(a)



def _pair(a, b) -> tuple[Array, Array]:
    """Coerce non-Array operands to the other operand's dtype."""
    if not isinstance(a, Array) and not isinstance(b, Array):
        return Array(a), Array(b)
    if not isinstance(b, Array):
        return a, Array(np.asarray(b, dtype=a.data.dtype))
    if not isinstance(a, Array):
        return Array(np.asarray(a, dtype=b.data.dtype)), b
    return a, b

def _check_dtypes(a: Array, b: Array) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"mixed dtypes {a.data.dtype.name} and {b.data.dtype.name}; cast explicitly")


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == len(big):
        for x, y in zip(small, big):
            if x != y and x != 1 and y != 1:
                raise ValueError(f"shapes {sa} and {sb} do not align")
        return
    # Implicit left-padding is only allowed when the smaller shape matches
    # the larger one's trailing axes exactly (leading-batch alignment).
    if big[len(big) - len(small):] != small:
        raise ValueError(f"shapes {sa} and {sb} do not align; reshape explicitly")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Array], backward_fn) -> Array:
    out = Array(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _acc(node: Array, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Array:
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b) -> Array:
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Array:
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def div(a, b) -> Array:
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    _check_broadcast(a.shape, b.shape)
    data = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bw)


def minimum(a, b) -> Array:
    """Elementwise min; gradient at ties is split evenly."""
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    _check_broadcast(a.shape, b.shape)
    data = np.minimum(a.data, b.data)

    def bw(g):
        lt = a.data < b.data
        eq = a.data == b.data
        wa = lt + 0.5 * eq
        _acc(a, _unbroadcast(g * wa, a.data.shape))
        _acc(b, _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _make(data, (a, b), bw)


def maximum(a, b) -> Array:
    """Elementwise max; gradient at ties is split evenly."""
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    _check_broadcast(a.shape, b.shape)
    data = np.maximum(a.data, b.data)

    def bw(g):
        gt = a.data > b.data
        eq = a.data == b.data
        wa = gt + 0.5 * eq
        _acc(a, _unbroadcast(g * wa, a.data.shape))
        _acc(b, _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _make(data, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary


def neg(a: Array) -> Array:
    a = a if isinstance(a, Array) else Array(a)

    def bw(g):
        _acc(a, -g)

    return _make(-a.data, (a,), bw)


def exp(a: Array) -> Array:
    data = np.exp(a.data)

    def bw(g):
        _acc(a, g * data)

    return _make(data, (a,), bw)


def log(a: Array) -> Array:
    data = np.log(a.data)

    def bw(g):
        _acc(a, g / a.data)

    return _make(data, (a,), bw)


def sqrt(a: Array) -> Array:
    data = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * (0.5 / data))

    return _make(data, (a,), bw)


def square(a: Array) -> Array:
    def bw(g):
        _acc(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def sin(a: Array) -> Array:
    def bw(g):
        _acc(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bw)


def cos(a: Array) -> Array:
    def bw(g):
        _acc(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bw)


def atan2(y, x) -> Array:
    """Elementwise arctangent of y/x using the signs of both arguments."""
    y, x = _pair(y, x)
    _check_dtypes(y, x)
    _check_broadcast(y.shape, x.shape)
    data = np.arctan2(y.data, x.data)

    def bw(g):
        denom = y.data * y.data + x.data * x.data
        _acc(y, _unbroadcast(g * x.data / denom, y.data.shape))
        _acc(x, _unbroadcast(g * (-y.data) / denom, x.data.shape))

    return _make(data, (y, x), bw)


def tanh(a: Array) -> Array:
    data = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - data * data))

    return _make(data, (a,), bw)


def sigmoid(a: Array) -> Array:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _acc(a, g * data * (1.0 - data))

    return _make(data.astype(x.dtype), (a,), bw)


def relu(a: Array) -> Array:
    def bw(g):
        _acc(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def clamp(a: Array, lo: float, hi: float) -> Array:
    """Clip to [lo, hi]; gradient passes through only inside the range."""
    data = np.clip(a.data, lo, hi)

    def bw(g):
        _acc(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(data, (a,), bw)


def detach(a: Array) -> Array:
    return Array(a.data)


# ---------------------------------------------------------------------------
# contractions, reductions, shape ops


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with optional leading batch axes on either side."""
    a, b = _pair(a, b)
    _check_dtypes(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires rank >= 2; reshape vectors explicitly")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"inner extents disagree: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        _acc(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        _acc(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return _make(data, (a, b), bw)


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Array, axis=None, keepdims: bool = False) -> Array:
    axes = _axis_tuple(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bw)


def mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / count, dtype=a.data.dtype))


def reshape(a: Array, shape) -> Array:
    data = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(data, (a,), bw)


def transpose(a: Array, axes: Sequence[int]) -> Array:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bw(g):
        _acc(a, g.transpose(inv))

    return _make(data, (a,), bw)


def concat(arrays: Iterable[Array], axis: int) -> Array:
    arrays = [x if isinstance(x, Array) else Array(x) for x in arrays]
    for x in arrays[1:]:
        _check_dtypes(arrays[0], x)
    data = np.concatenate([x.data for x in arrays], axis=axis)
    sizes = [x.data.shape[axis] for x in arrays]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for x, start, stop in zip(arrays, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _acc(x, g[tuple(idx)])

    return _make(data, arrays, bw)


def slice_axis(a: Array, axis: int, start: int, stop: int) -> Array:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return _make(data.copy(), (a,), bw)


# ---------------------------------------------------------------------------
# composites


def softmax(a: Array, axis: int = -1) -> Array:
    """Numerically stable softmax; the max shift is detached (zero gradient)."""
    shift = constant(a.data.max(axis=axis, keepdims=True), dtype=a.data.dtype)
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def layer_norm(a: Array, gain: Array, bias: Array, eps: float = 1e-5) -> Array:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    mu = mean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = mean(square(centered), axis=-1, keepdims=True)
    inv = div(constant(np.asarray(1.0, dtype=a.data.dtype)), sqrt(add(var, np.asarray(eps, dtype=a.data.dtype))))
    return add(mul(mul(centered, inv), gain), bias)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Array) -> None:
    """Fill gradients of every requires_grad node reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Array] = []
    visited: set[int] = set()
    stack: list[tuple[Array, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[Array]) -> None:
    for p in params:
        p.grad = None
