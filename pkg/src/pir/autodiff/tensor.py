"""Dense float64 tensors with reverse-mode gradients.

Every differentiable op appends a record to the tape: the output tensor keeps
its parents, a backward closure and a monotonically increasing sequence
number.  ``backward`` collects the records reachable from the loss and replays
them in descending sequence order, which is exactly the reverse of execution
order.  Recording is suspended inside ``no_grad()``.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from pir.errors import DegenerateRowError, ShapeError

DTYPE = np.float64

_sequence = itertools.count()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def is_recording() -> bool:
    return _recording


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1
        self.name = name

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Gradients accumulate across calls until ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise ShapeError("loss does not depend on any tensor that requires grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._seq = next(_sequence)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting)
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only: no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """ln(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    passed = np.ones_like(out, dtype=bool)
    if lo is not None:
        passed &= a.data >= lo
    if hi is not None:
        passed &= a.data <= hi
    return _make(out, (a,), lambda g: (g * passed,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; the backward scatters with ``np.add.at``."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (embedding lookup when axis=0)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices.reshape(-1),
                  np.moveaxis(g, tuple(range(axis, axis + indices.ndim)),
                              tuple(range(indices.ndim))).reshape((-1,) + moved.shape[1:]))
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward)


def embedding(weight, indices) -> Tensor:
    return take(weight, indices, axis=0)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def sparse_matmul(a, matrix) -> Tensor:
    """``a @ matrix`` where ``matrix`` is a constant scipy sparse (or dense) matrix.

    ``a`` has shape [..., M]; ``matrix`` is [M, P].
    """
    a = as_tensor(a)
    lead = a.shape[:-1]
    flat = a.data.reshape(-1, a.shape[-1])
    out = np.asarray(matrix.T @ flat.T).T.reshape(lead + (matrix.shape[1],))

    def backward(g):
        gf = g.reshape(-1, matrix.shape[1])
        return (np.asarray(matrix @ gf.T).T.reshape(a.shape),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# attention helpers
# ---------------------------------------------------------------------------
def masked_softmax(x, additive_bias=None, axis: int = -1) -> Tensor:
    """Softmax of ``x + additive_bias`` along ``axis``.

    Bias entries may be ``-inf``; those positions come out exactly 0.  A row
    whose bias is entirely ``-inf`` raises instead of producing NaN.
    """
    x = as_tensor(x)
    bias = None
    if additive_bias is not None:
        bias = as_tensor(additive_bias)
        z = x.data + bias.data
    else:
        z = x.data
    row_max = z.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise DegenerateRowError("softmax row has no finite entry (every position masked)")
    e = np.exp(z - row_max)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dz = out * (g - (g * out).sum(axis=axis, keepdims=True))
        grads = [_unbroadcast(dz, x.shape)]
        if bias is not None:
            grads.append(_unbroadcast(dz, bias.shape))
        return grads

    parents = (x,) if bias is None else (x, bias)
    return _make(out, parents, backward)


def softmax(x, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply an affine map."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gxhat = g * weight.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, weight.shape), _unbroadcast(g, bias.shape))

    return _make(out, (x, weight, bias), backward)
