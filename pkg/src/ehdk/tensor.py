"""
Dense tensor with a reverse-mode tape.

Every op returns a new :class:`Tensor`.  When any input requires a gradient
the output remembers its parents and a backward rule; ``Tensor.backward``
orders the recorded ops topologically and replays their rules in reverse.
Backward rules return one gradient array per parent (``None`` to skip) and
never mutate their inputs, so gradient arrays can be shared freely.

Most ops here work on NCHW data, but the container itself accepts any rank
because attention needs (batch, tokens, dim) matrices.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BoundsError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_check_finite = False
_mac_hook: Optional[Callable[[int], None]] = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NumericError` naming the op that first produced NaN/Inf."""
    global _check_finite
    prev, _check_finite = _check_finite, True
    try:
        yield
    finally:
        _check_finite = prev


@contextlib.contextmanager
def mac_hook(fn):
    global _mac_hook
    prev, _mac_hook = _mac_hook, fn
    try:
        yield
    finally:
        _mac_hook = prev


def count_macs(n):
    if _mac_hook is not None:
        _mac_hook(int(n))


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype != np.float32:
                arr = arr.astype(DEFAULT_DTYPE, copy=False)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- backward sweep ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar", self.shape)
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None:
                continue
            g_out = node.grad
            if g_out is not None:
                grads = node._backward(g_out)
                for parent, g in zip(node._parents, grads):
                    if g is None or not parent.requires_grad:
                        continue
                    parent.grad = g if parent.grad is None else parent.grad + g
            # interior nodes release their buffers once consumed
            node.grad = None
            node._parents = ()
            node._backward = None

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return multiply(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological_order(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward, op):
    """Wrap ``data`` as an op output and record it on the tape if needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operands must share one shape", a.shape, b.shape)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def add(a, b):
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_n(tensors):
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape("add_n", tensors[0], t)
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return make_result(out, tensors, lambda g: (g,) * len(tensors), "add_n")


def multiply(a, b):
    _same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "multiply")


def scale(a, c):
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c):
    return make_result(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x):
    s = _sigmoid(x.data)
    xd = x.data
    return make_result(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


def exp(x, clip=None):
    """Element-wise exponential; ``clip`` bounds the exponent (zero gradient outside)."""
    xd = x.data
    if clip is not None:
        lo, hi = clip
        inside = (xd >= lo) & (xd <= hi)
        e = np.exp(np.clip(xd, lo, hi))
        return make_result(e, (x,), lambda g: (g * e * inside,), "exp")
    with np.errstate(over="ignore"):
        e = np.exp(xd)      # overflow surfaces as inf, which anomaly mode reports
    return make_result(e, (x,), lambda g: (g * e,), "exp")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def matmul(a, b):
    """Batched matrix product over the last two axes (leading axes must agree)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: incompatible operands", a.shape, b.shape)
    ad, bd = a.data, b.data
    count_macs(int(np.prod(a.shape)) * b.shape[-1])

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, (a, b), backward, "matmul")


def getitem(x, index):
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return make_result(np.array(x.data[index]), (x,), backward, "getitem")


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=1):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty tensor list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError("concat: inputs disagree off the concat axis", ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def concat_channels(tensors):
    return concat(tensors, axis=1)


def split_channels(x, sizes):
    out, start = [], 0
    for s in sizes:
        out.append(x[:, start:start + s])
        start += s
    if start != x.shape[1]:
        raise ShapeError("split_channels: sizes do not cover the channel axis", (start,), x.shape)
    return out


def upsample_nearest(x, factor):
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    f = int(factor)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest expects NCHW", x.shape)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def avgpool_region(x, rect):
    """Per-channel mean over ``rect = (y0, x0, y1, x1)`` (half-open); returns (n, c, 1, 1)."""
    y0, x0, y1, x1 = (int(v) for v in rect)
    n, c, h, w = x.shape
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        raise BoundsError(f"region {rect} outside map of size {h}x{w}")
    area = (y1 - y0) * (x1 - x0)
    out = x.data[:, :, y0:y1, x0:x1].mean(axis=(2, 3), keepdims=True)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, :, y0:y1, x0:x1] = g / area
        return (full,)

    return make_result(out, (x,), backward, "avgpool_region")


def stack_rows(tensors: Sequence[Tensor]):
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)
