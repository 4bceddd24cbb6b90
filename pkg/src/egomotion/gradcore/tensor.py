"""Dense tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the graph in reverse topological order.  Only leaf tensors created with
``requires_grad=True`` keep a ``.grad``; it is accumulated, never reset.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def wide_accumulation_enabled() -> bool:
    return getattr(_state, "wide", False)


@contextlib.contextmanager
def wide_accumulation():
    """Accumulate 32-bit matmuls in 64-bit and round once.

    Products of float32 values are exact in float64, so each output element no
    longer depends on how BLAS blocks the other rows: one frame computed alone
    matches the same frame inside a long batch.
    """
    prev = wide_accumulation_enabled()
    _state.wide = True
    try:
        yield
    finally:
        _state.wide = prev


class ShapeError(ValueError):
    pass


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def square(self):
        return mul(self, self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        return Tensor(arr)
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise binary ops ---------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), back)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._make(out, (a, b), back)


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


# -- unary ----------------------------------------------------------------------
def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a):
    ad = a.data
    return Tensor._make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a):
    ad = a.data
    return Tensor._make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def elu(a, alpha=1.0):
    ad = a.data
    neg_part = alpha * np.expm1(np.minimum(ad, 0.0))
    out = np.where(ad > 0, ad, neg_part)
    return Tensor._make(out, (a,), lambda g: (g * np.where(ad > 0, 1.0, neg_part + alpha),))


def sigmoid(a):
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    """Swish: x * sigmoid(x)."""
    ad = a.data
    s = 0.5 * (np.tanh(0.5 * ad) + 1.0)
    return Tensor._make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


def relu(a):
    ad = a.data
    return Tensor._make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def absolute(a):
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


# -- reductions -------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return Tensor._make(out, (a,), back)


def tmax(a, axis, keepdims=False):
    """Max over one axis; ties split the gradient evenly."""
    ax = axis % a.ndim
    ad = a.data
    out_k = ad.max(axis=ax, keepdims=True)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        hit = (ad == out_k)
        return (g * hit / hit.sum(axis=ax, keepdims=True),)

    return Tensor._make(out_k if keepdims else np.squeeze(out_k, ax), (a,), back)


def softmax(a, axis=-1):
    ad = a.data
    e = np.exp(ad - ad.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), back)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then optional affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    out = xhat if gd is None else xhat * gd
    if beta is not None:
        out = out + beta.data
    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)

    def back(g):
        gx = g if gd is None else g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gamma is not None:
            res.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            res.append(_unbroadcast(g, beta.shape))
        return tuple(res)

    return Tensor._make(out, parents, back)


# -- linear algebra ---------------------------------------------------------------
def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: operands must have rank >= 1, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch between shapes {a.shape} and {b.shape}")
    try:
        if a.dtype == np.float32 and wide_accumulation_enabled():
            out = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64)).astype(np.float32)
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back)


# -- shape ops ---------------------------------------------------------------------
def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    src_shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(a.data[idx], (a,), back)


def take(a, indices, axis):
    """Gather along one axis with an integer index array."""
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    src_shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        sl = [slice(None)] * len(src_shape)
        sl[ax] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return Tensor._make(np.take(a.data, indices, axis=ax), (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


def broadcast_to(a, shape):
    src = a.shape
    return Tensor._make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, src),))


def pad_front(a, n, axis):
    """Zero-pad ``n`` entries at the start of ``axis``."""
    ax = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[ax] = (n, 0)
    size = a.shape[ax]

    def back(g):
        return (np.take(g, np.arange(n, n + size), axis=ax),)

    return Tensor._make(np.pad(a.data, widths), (a,), back)


def where(mask, a, b):
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return Tensor._make(out, (a, b),
                        lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                                   _unbroadcast(np.where(mask, 0, g), b.shape)))
