"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Define-by-run: every operation appends a node to an implicit tape (the
``Tensor`` DAG).  ``backward()`` on a scalar walks the tape once in reverse
topological order, which makes gradient accumulation deterministic for a
fixed graph.  Only the operations needed by the models in this package are
provided; there is no broadcasting cleverness beyond row-wise biases.

Tensors are treated as immutable after construction.  Optimizers may swap
the ``data`` array of leaf parameters between passes, but nothing mutates a
tensor that is already part of a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (non-scalar loss, reused tape)."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``requires_grad`` marks leaves whose gradient should be populated by
    ``backward``.  Interior nodes inherit the flag from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    # Arithmetic sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backprop):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _topo_order(root):
    """Post-order over the tape; each node appears exactly once."""
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every tensor reachable from ``loss``.

    ``loss`` must be scalar-shaped.  A tape can be walked only once;
    rebuilding the forward pass is the supported way to "reset".
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if loss.grad is not None:
        raise TapeError("backward() already ran on this tape; rebuild the forward pass")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    """Elementwise sum; also accepts a row bias (d,) against (n, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and not _bias_compatible(a.data.shape, b.data.shape):
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def backprop(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.data.shape))

    return _make(out_data, (a, b), backprop)


def _bias_compatible(sa, sb):
    # Allow exactly the (n, d) + (d,) pattern in either order.
    return (len(sa) == 2 and sb == sa[1:]) or (len(sb) == 2 and sa == sb[1:])


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"sub: {a.data.shape} vs {b.data.shape}")
    out_data = a.data - b.data

    def backprop(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(out_data, (a, b), backprop)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), backprop)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _make(out_data, (a,), backprop)


def matmul(a, b):
    """Matrix product.  2-D operands, or 3-D with equal leading batch dim."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != len(sb) or len(sa) not in (2, 3):
        raise ShapeMismatch(f"matmul: rank mismatch {sa} vs {sb}")
    if sa[-1] != sb[-2] or (len(sa) == 3 and sa[0] != sb[0]):
        raise ShapeMismatch(f"matmul: {sa} vs {sb}")
    out_data = np.matmul(a.data, b.data)

    def backprop(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -2, -1)))
        if b.requires_grad:
            _accum(b, np.matmul(np.swapaxes(a.data, -2, -1), g))

    return _make(out_data, (a, b), backprop)


def reshape(a, shape):
    a = as_tensor(a)
    old_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backprop(g):
        if a.requires_grad:
            _accum(a, g.reshape(old_shape))

    return _make(out_data, (a,), backprop)


def transpose(a):
    """2-D transpose."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose: need a 2-D tensor, got {a.data.shape}")
    out_data = a.data.T

    def backprop(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(out_data, (a,), backprop)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backprop)


def _scatter_rows(idx, g, num_rows):
    """Sum rows of ``g`` into ``num_rows`` buckets given by ``idx``.

    Uses bincount for 2-D inputs (much faster than np.add.at).
    """
    if g.ndim == 2:
        d = g.shape[1]
        pos = (idx.astype(np.intp) * d)[:, None] + np.arange(d)
        flat = np.bincount(pos.ravel(), weights=g.ravel(),
                           minlength=num_rows * d)
        return flat.reshape(num_rows, d).astype(g.dtype, copy=False)
    acc = np.zeros((num_rows,) + g.shape[1:], dtype=g.dtype)
    np.add.at(acc, idx, g)
    return acc


def gather_rows(a, index):
    """Select rows ``a[index]``; the gradient scatter-adds back."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows: index must be 1-D")
    if a.data.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0])):
        raise IndexError("gather_rows: index out of range")
    out_data = a.data[idx]

    def backprop(g):
        if a.requires_grad:
            _accum(a, _scatter_rows(idx, g, a.data.shape[0]))

    return _make(out_data, (a,), backprop)


def segment_sum(values, segments, num_segments):
    """Sum rows of ``values`` into ``num_segments`` buckets.

    Row ``i`` of the result is the sum of all rows whose segment id is ``i``;
    empty segments yield zero rows.
    """
    values = as_tensor(values)
    seg = np.asarray(segments, dtype=np.intp)
    if seg.ndim != 1 or seg.shape[0] != values.data.shape[0]:
        raise ShapeMismatch(
            f"segment_sum: {seg.shape} segment ids for {values.data.shape[0]} rows"
        )
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError("segment_sum: segment id out of range")
    out_data = _scatter_rows(seg, values.data, num_segments)

    def backprop(g):
        if values.requires_grad:
            _accum(values, g[seg])

    return _make(out_data, (values,), backprop)


def tensor_sum(a):
    """Sum of all entries, as a scalar-shaped tensor."""
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def backprop(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backprop)


# ---------------------------------------------------------------------------
# activations


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), backprop)


def sigmoid(a):
    a = as_tensor(a)
    z = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backprop)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backprop(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backprop)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "none": None}


def dense(x, w, b, activation="none"):
    """``activation(x @ w + b)`` with ``w``: (in, out) and ``b``: (out,)."""
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"dense: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    out = add(matmul(x, w), b)
    act = _ACTIVATIONS[activation]
    return out if act is None else act(out)


@dataclass
class GruParams:
    """Weights of one GRU cell, row-vector convention (``m @ w_z`` etc.)."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    def tensors(self):
        return [
            self.w_z, self.u_z, self.b_z,
            self.w_r, self.u_r, self.b_r,
            self.w_h, self.u_h, self.b_h,
        ]


def gru_cell(h, m, params):
    """Standard GRU update of hidden state ``h`` given input ``m``.

    z = sigmoid(m w_z + h u_z + b_z)
    r = sigmoid(m w_r + h u_r + b_r)
    c = tanh(m w_h + (r * h) u_h + b_h)
    h' = (1 - z) * h + z * c
    """
    h, m = as_tensor(h), as_tensor(m)
    if h.data.shape != m.data.shape:
        raise ShapeMismatch(f"gru_cell: h {h.data.shape} vs m {m.data.shape}")
    z = sigmoid(add(add(matmul(m, params.w_z), matmul(h, params.u_z)), params.b_z))
    r = sigmoid(add(add(matmul(m, params.w_r), matmul(h, params.u_r)), params.b_r))
    c = tanh(add(add(matmul(m, params.w_h), matmul(mul(r, h), params.u_h)), params.b_h))
    one_minus_z = scale(z, -1.0) + Tensor(np.ones_like(z.data))
    return add(mul(one_minus_z, h), mul(z, c))
