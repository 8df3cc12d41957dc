"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Deliberately minimal: exactly the primitives the evidential losses and
the graph forecaster need.  Every operation records its parents and a
vector-Jacobian closure on the result node; ``Tensor.backward`` walks
the resulting DAG once in reverse topological order and accumulates
gradients into ``.grad``.

All math is done in the dtype of the operands (float64 unless a caller
opts into float32).  Forward evaluation is deterministic: identical
inputs produce bit-identical outputs within one build.
"""

from __future__ import annotations

import threading

import numpy as np

from . import _kernels
from .errors import DomainError, ShapeMismatchError
from .special import digamma as _digamma_np
from .special import lgamma as _lgamma_np

_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _coerce(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    # -- reverse pass ----------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``.

        The loss must be a scalar (a single element).  Each tape node is
        visited exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            for parent in it:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    break
            else:
                topo.append(node)
                stack.pop()

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, vjp, op):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: operands have incompatible shapes {a.shape} and {b.shape}"
        ) from None


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(ad * bd, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _result(ad / bd, (a, b), vjp, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: operands have incompatible shapes {a.shape} and {b.shape}"
        )
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), vjp, "matmul")


# -- shape manipulation --------------------------------------------------


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatchError(
                f"concat along axis {axis}: incompatible shapes "
                f"{[t.shape for t in tensors]}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat"
    )


def slice_(t, key):
    t = as_tensor(t)
    data = t.data[key]
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[key] += g
        return (out,)

    return _result(data, (t,), vjp, "slice")


def reshape(t, shape):
    t = as_tensor(t)
    old = t.shape

    def vjp(g):
        return (g.reshape(old),)

    return _result(t.data.reshape(shape), (t,), vjp, "reshape")


def transpose(t):
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a 2-D tensor, got {t.shape}")

    def vjp(g):
        return (g.T,)

    return _result(t.data.T.copy(), (t,), vjp, "transpose")


def broadcast_to(t, shape):
    t = as_tensor(t)
    try:
        data = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ShapeMismatchError(
            f"broadcast: cannot broadcast shape {t.shape} to {shape}"
        ) from None
    old = t.shape

    def vjp(g):
        return (_unbroadcast(g, old),)

    return _result(data.copy(), (t,), vjp, "broadcast")


# -- reductions -----------------------------------------------------------


def sum_(t, axis=None, keepdims=False):
    t = as_tensor(t)
    shape = t.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _result(t.data.sum(axis=axis, keepdims=keepdims), (t,), vjp, "sum")


def mean(t, axis=None, keepdims=False):
    t = as_tensor(t)
    shape = t.shape
    if axis is None:
        n = t.data.size
    else:
        n = shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _result(t.data.mean(axis=axis, keepdims=keepdims), (t,), vjp, "mean")


# -- elementwise nonlinearities -------------------------------------------


def exp(t):
    t = as_tensor(t)
    out = np.exp(t.data)

    def vjp(g):
        return (g * out,)

    return _result(out, (t,), vjp, "exp")


def log(t):
    t = as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log requires strictly positive arguments")
    td = t.data

    def vjp(g):
        return (g / td,)

    return _result(np.log(td), (t,), vjp, "log")


def sqrt(t):
    t = as_tensor(t)
    if np.any(t.data < 0.0):
        raise DomainError("sqrt requires non-negative arguments")
    out = np.sqrt(t.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _result(out, (t,), vjp, "sqrt")


def square(t):
    t = as_tensor(t)
    td = t.data

    def vjp(g):
        return (g * 2.0 * td,)

    return _result(td * td, (t,), vjp, "square")


def absolute(t):
    t = as_tensor(t)
    td = t.data

    def vjp(g):
        return (g * np.sign(td),)

    return _result(np.abs(td), (t,), vjp, "abs")


def tanh(t):
    t = as_tensor(t)
    out = np.tanh(t.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _result(out, (t,), vjp, "tanh")


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(t):
    t = as_tensor(t)
    out = _sigmoid_np(t.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (t,), vjp, "sigmoid")


def softplus(t):
    """log(1 + exp(x)), computed without overflow."""
    t = as_tensor(t)
    td = t.data

    def vjp(g):
        return (g * _sigmoid_np(td),)

    return _result(np.logaddexp(0.0, td), (t,), vjp, "softplus")


def softmax(t, axis=-1):
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (t,), vjp, "softmax")


def clip(t, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly inside."""
    t = as_tensor(t)
    td = t.data
    mask = (td > lo) & (td < hi)

    def vjp(g):
        return (g * mask,)

    return _result(np.clip(td, lo, hi), (t,), vjp, "clip")


def lgamma(t):
    t = as_tensor(t)
    td = t.data
    out = _lgamma_np(td)

    def vjp(g):
        return (g * _digamma_np(td),)

    return _result(out, (t,), vjp, "lgamma")


# -- gather / segment ops ---------------------------------------------------


def gather_pairs(t, rows, cols):
    """Pick t[rows[k], cols[k]] for each k; returns a flat vector."""
    t = as_tensor(t)
    n, m = t.shape
    shape = t.shape

    def vjp(g):
        flat = np.bincount(rows * m + cols, weights=g, minlength=n * m)
        return (flat.reshape(shape).astype(g.dtype, copy=False),)

    return _result(t.data[rows, cols], (t,), vjp, "gather_pairs")


def _f64c(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def segment_softmax(logits, seg_ptr):
    """Softmax over destination segments of a flat edge vector."""
    logits = as_tensor(logits)
    out = _kernels.seg_softmax(_f64c(logits.data), seg_ptr)

    def vjp(g):
        return (_kernels.seg_softmax_grad(out, _f64c(g), seg_ptr),)

    return _result(out, (logits,), vjp, "segment_softmax")


def neighbor_weighted_sum(weights, feats, src, seg_ptr):
    """out[d] = sum over edges e into d of weights[e] * feats[src[e]].

    `weights` is a flat per-edge vector, `feats` a (nodes, F) matrix.
    """
    weights, feats = as_tensor(weights), as_tensor(feats)
    wd, fd = _f64c(weights.data), _f64c(feats.data)
    out = _kernels.gather_weighted_sum(wd, fd, src, seg_ptr)

    def vjp(g):
        gw, gf = _kernels.gather_weighted_sum_grad(wd, fd, src, seg_ptr, _f64c(g))
        return gw, gf

    return _result(out, (weights, feats), vjp, "neighbor_weighted_sum")
