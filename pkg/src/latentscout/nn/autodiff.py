"""Reverse-mode automatic differentiation over numpy float64 arrays.

Every forward pass records a fresh tape: each `Tensor` remembers its parent
tensors and a vector-Jacobian callback.  `backward` walks the tape once in
reverse topological order and accumulates gradients.  Nothing is retained
between passes, so there is no stale-graph state to invalidate.

Only the operations the belief / mixing networks need are implemented; they
all work on 1-D or 2-D arrays and raise DimensionError on shape mismatch
rather than silently broadcasting in surprising ways.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DimensionError, UsageError


class Tensor:
    """A node on the tape: a value plus how to push gradients to its parents."""

    __slots__ = ("data", "grad", "_parents", "_vjp", "_accum")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjp: Optional[Callable] = None,
        accum: Optional[Callable] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._vjp = vjp
        self._accum = accum

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, leaf={self._vjp is None})"

    # Small operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap plain arrays/floats as constant leaves; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.data.shape),
                             _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 2 and b.data.ndim == 1:
        if a.data.shape[1] != b.data.shape[0]:
            raise DimensionError(f"matmul {a.data.shape} @ {b.data.shape}")
        return Tensor(a.data @ b.data, (a, b),
                      lambda g: (np.outer(g, b.data), a.data.T @ g))
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise DimensionError(f"matmul {a.data.shape} @ {b.data.shape}")
        return Tensor(a.data @ b.data, (a, b),
                      lambda g: (g @ b.data.T, a.data.T @ g))
    if a.data.ndim == 1 and b.data.ndim == 2:
        if a.data.shape[0] != b.data.shape[0]:
            raise DimensionError(f"matmul {a.data.shape} @ {b.data.shape}")
        return Tensor(a.data @ b.data, (a, b),
                      lambda g: (b.data @ g, np.outer(a.data, g)))
    raise DimensionError(f"matmul unsupported ndims {a.data.ndim} and {b.data.ndim}")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    return Tensor(a.data.T, (a,), lambda g: (g.T,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return Tensor(y, (a,), lambda g: (g * (1.0 - y * y),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return Tensor(a.data.mean(), (a,),
                  lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def mean_rows(a) -> Tensor:
    """Mean over axis 0 of a 2-D tensor, yielding a 1-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("mean_rows expects a 2-D tensor")
    k = a.data.shape[0]
    return Tensor(a.data.mean(axis=0), (a,),
                  lambda g: (np.tile(g / k, (k, 1)),))


def stack_rows(rows: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor."""
    ts = [as_tensor(r) for r in rows]
    if not ts:
        raise UsageError("stack_rows needs at least one row")
    width = ts[0].data.shape
    for t in ts:
        if t.data.ndim != 1 or t.data.shape != width:
            raise DimensionError("stack_rows rows must be 1-D of equal length")

    def vjp(g):
        return tuple(g[i] for i in range(len(ts)))

    return Tensor(np.stack([t.data for t in ts]), tuple(ts), vjp)


def row(a, i: int) -> Tensor:
    """Extract row i of a 2-D tensor as a 1-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row expects a 2-D tensor")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return Tensor(a.data[i].copy(), (a,), vjp)


def concat(parts: Sequence) -> Tensor:
    """Concatenate 1-D tensors."""
    ts = [as_tensor(p) for p in parts]
    for t in ts:
        if t.data.ndim != 1:
            raise DimensionError("concat expects 1-D tensors")
    sizes = [t.data.shape[0] for t in ts]

    def vjp(g):
        out, off = [], 0
        for n in sizes:
            out.append(g[off:off + n])
            off += n
        return tuple(out)

    return Tensor(np.concatenate([t.data for t in ts]), tuple(ts), vjp)


def hcat(parts: Sequence) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    ts = [as_tensor(p) for p in parts]
    n_rows = ts[0].data.shape[0]
    for t in ts:
        if t.data.ndim != 2 or t.data.shape[0] != n_rows:
            raise DimensionError("hcat expects 2-D tensors with equal row count")
    sizes = [t.data.shape[1] for t in ts]

    def vjp(g):
        out, off = [], 0
        for n in sizes:
            out.append(g[:, off:off + n])
            off += n
        return tuple(out)

    return Tensor(np.concatenate([t.data for t in ts], axis=1), tuple(ts), vjp)


def col_slice(a, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("col_slice expects a 2-D tensor")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor(a.data[:, start:stop].copy(), (a,), vjp)


def row_softmax(a) -> Tensor:
    """Softmax along the last axis of a 2-D tensor.

    Backward uses the closed form g_x = y * (g - sum(g * y, axis=-1)), which
    avoids materializing the Jacobian.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("row_softmax expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, (a,), vjp)


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors as a scalar tensor."""
    return sum_all(mul(a, b))


def backward(root: Tensor) -> None:
    """Accumulate gradients of the scalar `root` into every reachable leaf.

    Leaves created from parameters push their gradient into the owning
    Parameter via the accumulation callback, so repeated backward calls add up
    until the caller resets them.
    """
    if root.data.size != 1:
        raise UsageError("backward requires a scalar root")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node._vjp is not None:
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
        if node._accum is not None:
            node._accum(node.grad)
