"""Small reverse-mode differentiation engine over dense float64 arrays.

Only the primitives the contrastive models need are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not parents else None
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward: implicit seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), backward if rg else None, op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (temperature scaling, negation)."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def total(a) -> Tensor:
    """Sum of all entries, as a scalar."""
    a = as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def weighted_sum(a, weights) -> Tensor:
    """Scalar sum of ``a * weights`` with constant weights of the same shape."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match {a.shape}")
    return _make(np.sum(a.data * w), (a,), lambda g: (g * w,), "weighted_sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def take_rows(a, index) -> Tensor:
    """Gather rows; repeated indices scatter-add in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), backward, "take_rows")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def segment_pool(a, segments, mode="mean") -> Tensor:
    """Pool consecutive row segments of a matrix into one row each.

    ``segments`` lists segment lengths in order. ``mean`` averages rows,
    ``max`` takes the columnwise maximum (gradient routed to the lowest
    arg-max row), ``first`` selects the first row of each segment.
    """
    a = as_tensor(a)
    lengths = np.asarray(segments, dtype=np.intp)
    if a.data.ndim != 2 or lengths.sum() != a.shape[0]:
        raise ShapeError(f"segment_pool: segments {lengths.tolist()} do not cover {a.shape}")
    if np.any(lengths < 1):
        raise ShapeError("segment_pool: empty segment")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    n_cols = a.shape[1]

    if mode == "mean":
        out = np.add.reduceat(a.data, starts, axis=0) / lengths[:, None]

        def backward(g):
            return (np.repeat(g / lengths[:, None], lengths, axis=0),)

    elif mode == "max":
        rows = np.empty((len(lengths), n_cols), dtype=np.intp)
        for s, (st, ln) in enumerate(zip(starts, lengths)):
            rows[s] = st + np.argmax(a.data[st:st + ln], axis=0)
        out = a.data[rows, np.arange(n_cols)]

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, np.broadcast_to(np.arange(n_cols), rows.shape)), g)
            return (full,)

    elif mode == "first":
        return take_rows(a, starts)
    else:
        raise ValueError(f"segment_pool: unknown mode {mode!r}")
    return _make(out, (a,), backward, f"segment_{mode}")


_NORM_EPS = 1e-30


def cosine_rows(a, b) -> Tensor:
    """Row-paired cosine similarity of two M x D matrices, shape (M,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"cosine_rows: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt(np.sum(a.data * a.data, axis=1) + _NORM_EPS)
    nb = np.sqrt(np.sum(b.data * b.data, axis=1) + _NORM_EPS)
    dot = np.sum(a.data * b.data, axis=1)
    out = dot / (na * nb)

    def backward(g):
        g = g[:, None]
        ga = g * (b.data / (na * nb)[:, None] - out[:, None] * a.data / (na * na)[:, None])
        gb = g * (a.data / (na * nb)[:, None] - out[:, None] * b.data / (nb * nb)[:, None])
        return ga, gb

    return _make(out, (a, b), backward, "cosine")


def logsumexp(a, mask=None) -> Tensor:
    """Row-wise log-sum-exp over the last axis, optionally restricted by a boolean mask."""
    a = as_tensor(a)
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"logsumexp: mask {m.shape} does not match {a.shape}")
    if not np.all(m.any(axis=-1)):
        raise ValueError("logsumexp: a row has no selected entries")
    x = np.where(m, a.data, -np.inf)
    peak = np.max(x, axis=-1, keepdims=True)
    e = np.where(m, np.exp(x - peak), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + peak)[..., 0]

    def backward(g):
        return (g[..., None] * e / s,)

    return _make(out, (a,), backward, "logsumexp")


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def pick(a, index) -> Tensor:
    """Select one entry per row of a matrix: out[r] = a[r, index[r]]."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _make(out, (a,), backward, "pick")
