"""Dense 2-D reverse-mode automatic differentiation.

Every value is a float64 matrix of shape ``(rows, cols)``.  Elementwise
binary operations accept equal shapes, or a ``(1, c)`` row / ``(r, 1)``
column operand broadcast against an ``(r, c)`` matrix; nothing else is
broadcast.

Example::

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> (x * x).sum().backward()
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class BackwardError(RuntimeError):
    """Raised on invalid use of :meth:`Tensor.backward`."""


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got array with {arr.ndim} dims")
    return arr


class Tensor:
    """A node in the computation graph.

    Leaves are created from external data, which must be finite.  Interior
    nodes record the operation tag, their parents and a closure that pushes
    the output gradient back to the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (), _op: str = "leaf"):
        arr = _as_matrix(data)
        if _op == "leaf" and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        self.data = arr
        self.data.flags.writeable = False
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # -- graph traversal -------------------------------------------------

    def _topo(self) -> list[Tensor]:
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
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        A graph may be differentiated once; call :meth:`zero_grad` on the
        root to reset before differentiating it again.
        """
        if self.shape != (1, 1):
            raise BackwardError(f"backward needs a scalar (1x1) root, got shape {self.shape}")
        if self._consumed:
            raise BackwardError("backward already ran through this graph; call zero_grad() first")
        order = self._topo()
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._consumed = True

    def zero_grad(self) -> None:
        """Clear gradients on every node reachable from this root."""
        for node in self._topo():
            node.grad = None
        self._consumed = False

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self) -> Tensor:
        return total_sum(self)

    def mean(self) -> Tensor:
        return total_mean(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=tuple(parents), _op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    (ra, ca), (rb, cb) = a.shape, b.shape
    rows = ra if ra == rb or rb == 1 else (rb if ra == 1 else -1)
    cols = ca if ca == cb or cb == 1 else (cb if ca == 1 else -1)
    if rows < 0 or cols < 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return rows, cols


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# -- binary elementwise --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), "scale", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


# -- unary elementwise ---------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: a._accumulate(g * (1.0 - out * out)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: a._accumulate(g * mask))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), "abs", lambda g: a._accumulate(g * np.sign(a.data)))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: a._accumulate(2.0 * g * a.data))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    mask = a.data >= floor
    return _make(np.where(mask, a.data, floor), (a,), "clamp_min", lambda g: a._accumulate(g * mask))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: a._accumulate(g.T))


# -- reductions ----------------------------------------------------------


def total_sum(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), (a,), "sum", lambda g: a._accumulate(np.full(a.shape, g[0, 0])))


def total_mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.array([[a.data.mean()]]), (a,), "mean", lambda g: a._accumulate(np.full(a.shape, g[0, 0] / n))
    )


def row_sum(a: Tensor) -> Tensor:
    return _make(a.data.sum(axis=1, keepdims=True), (a,), "row_sum", lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def col_mean(a: Tensor) -> Tensor:
    r = a.shape[0]
    return _make(
        a.data.mean(axis=0, keepdims=True), (a,), "col_mean", lambda g: a._accumulate(np.broadcast_to(g / r, a.shape))
    )


def row_norm(a: Tensor) -> Tensor:
    """L2 norm of every row, as an ``(r, 1)`` column."""
    out = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(out > 0, a.data / out, 0.0)
        a._accumulate(g * local)

    return _make(out, (a,), "row_norm", bw)


def row_logsumexp(a: Tensor) -> Tensor:
    m = a.data.max(axis=1, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    return _make(out, (a,), "row_logsumexp", lambda g: a._accumulate(g * shifted / s))


def row_softmax(a: Tensor) -> Tensor:
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _make(out, (a,), "row_softmax", bw)


def row_log_softmax(a: Tensor) -> Tensor:
    m = a.data.max(axis=1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        a._accumulate(g - soft * g.sum(axis=1, keepdims=True))

    return _make(out, (a,), "row_log_softmax", bw)


# -- indexing ------------------------------------------------------------


def take_rows(a: Tensor, index: Iterable[int]) -> Tensor:
    idx = np.asarray(list(index) if not isinstance(index, np.ndarray) else index, dtype=np.int64)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), "take_rows", bw)


def normalize_rows(a: Tensor) -> Tensor:
    """Divide each row by its L2 norm; rows of norm zero are rejected."""
    norms = row_norm(a)
    if np.any(norms.data == 0):
        raise ValueError("normalize_rows: zero-norm row")
    return div(a, norms)
