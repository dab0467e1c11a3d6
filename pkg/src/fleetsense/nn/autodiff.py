"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each op returns a new ``Tensor`` that remembers its parents and a closure
pushing the output adjoint back onto them. ``Tensor.backward`` walks the graph
in reverse topological order. Under ``no_grad()`` ops skip the bookkeeping.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- arithmetic
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


add_bias = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return _make(a.data - b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return _make(a.data * b.data, (a, b),
                 lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                            (b, _unbroadcast(g * a.data, b.shape))))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, shape).copy()),)

    return _make(np.sum(a.data, axis=axis), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- pointwise
def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: ((a, g * pos),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: ((a, g * (1.0 - y * y)),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: ((a, g * y),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: ((a, 2.0 * g * a.data),))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: ((a, _unbroadcast(g * pick_a, a.shape)),
                            (b, _unbroadcast(g * ~pick_a, b.shape))))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: ((a, _unbroadcast(g * pick_a, a.shape)),
                            (b, _unbroadcast(g * ~pick_a, b.shape))))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: ((a, g * inside),))


# ---------------------------------------------------------------- indexing
def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"row index out of range for {n} rows")

    def back(g):
        if idx.size > 256:
            # scatter-add through a sparse product; np.add.at is slow on large batches
            s = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
            return ((a, np.asarray(s @ g)),)
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return ((a, out),)

    return _make(a.data[idx], (a,), back)


def pick(a: Tensor, cols) -> Tensor:
    """``a[i, cols[i]]`` for every row ``i``."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"pick needs one column per row, got {cols.shape} for {a.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return ((a, out),)

    return _make(a.data[rows, cols], (a,), back)


class SegmentOp:
    """Precomputed sparse averaging operator, worth building for large reused graphs."""

    def __init__(self, segment_ids, n_segments: int):
        seg = _check_segments(segment_ids, n_segments)
        counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
        w = 1.0 / counts[seg] if seg.size else np.zeros(0)
        self.shape = (n_segments, seg.size)
        self.fwd = sp.csr_matrix((w, (seg, np.arange(seg.size))), shape=self.shape)
        self.bwd = self.fwd.T.tocsr()


def _check_segments(segment_ids, n_segments: int) -> np.ndarray:
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise ShapeError("segment id out of range")
    return seg


def segment_mean(a: Tensor, segment_ids, n_segments: int, op: Optional[SegmentOp] = None) -> Tensor:
    """Row-wise mean of ``a`` within each segment; empty segments give zeros."""
    if a.data.ndim != 2:
        raise ShapeError("segment_mean expects a matrix")
    if op is not None:
        if op.shape != (n_segments, a.shape[0]):
            raise ShapeError(f"segment operator {op.shape} does not fit {a.shape}")
        return _make(np.asarray(op.fwd @ a.data), (a,),
                     lambda g: ((a, np.asarray(op.bwd @ g)),))
    seg = _check_segments(segment_ids, n_segments)
    if seg.shape != (a.shape[0],):
        raise ShapeError(f"{seg.size} segment ids for {a.shape[0]} rows")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = np.zeros((n_segments, a.shape[1]))
    np.add.at(out, seg, a.data)
    out *= inv[:, None]
    return _make(out, (a,), lambda g: ((a, g[seg] * inv[seg, None]),))


# ---------------------------------------------------------------- softmax
def _check_mask(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax row with every entry masked")
    return mask


def masked_log_softmax(logits: Tensor, mask) -> Tensor:
    """Log-probabilities over unmasked entries; masked entries read 0 and get no gradient."""
    mask = _check_mask(logits.data, mask)
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.where(mask, np.exp(z), 0.0)
    s = ez.sum(axis=-1, keepdims=True)
    p = ez / s
    out = np.where(mask, z - np.log(s), 0.0)

    def back(g):
        g = np.where(mask, g, 0.0)
        return ((logits, g - p * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), back)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    mask = _check_mask(logits.data, mask)
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.where(mask, np.exp(z), 0.0)
    p = ez / ez.sum(axis=-1, keepdims=True)

    def back(g):
        return ((logits, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _make(p, (logits,), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple((p, g[sizes[i]:sizes[i + 1]]) for i, p in enumerate(parts))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, back)
