"""Reverse-mode autodiff over numpy arrays.

Tape-based: every op returns a Tensor that records its parents plus a
closure producing parent gradients.  A graph supports exactly one backward
pass; node references are dropped while backpropagating so activation
memory is released eagerly.

float64 is the verification precision (all gradient checks run at 64-bit);
float32 is allowed for training throughput.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StateError

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return pow_const(self, c)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None, grad_map: dict | None = None):
        """Reverse-mode sweep.  Leaf gradients accumulate into ``.grad``, or
        into ``grad_map`` (keyed by tensor) when given - the map form is what
        worker threads use so shared parameters are never written
        concurrently."""
        if self._bwd is None and not self.requires_grad:
            raise StateError("backward called on a tensor with no recorded graph")
        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if p._bwd is not None and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        local: dict = {}
        seed = np.ones_like(self.data) if grad is None else grad
        local[id(self)] = seed
        for node in reversed(topo):
            g = local.pop(id(node), None)
            if g is None or node._bwd is None:
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._bwd is not None:  # interior node
                    pid = id(parent)
                    cur = local.get(pid)
                    local[pid] = pg if cur is None else cur + pg
                elif grad_map is not None:
                    cur = grad_map.get(parent)
                    grad_map[parent] = pg.copy() if cur is None else cur + pg
                else:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
            node._bwd = None
            node._parents = ()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._bwd = None
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._bwd = bwd
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = b
        data = a.data + c
        return _node(data, (a,), lambda g: (g,))
    a = as_tensor(a)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), bwd)


def sub(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        data = a.data - b
        return _node(data, (a,), lambda g: (g,))
    a = as_tensor(a)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = b
        return _node(a.data * c, (a,), lambda g: (g * c,))
    a = as_tensor(a)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(data, (a, b), bwd)


def div(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * data / b.data, b.data.shape)
        return ga, gb

    return _node(data, (a, b), bwd)


def pow_const(a, c):
    a = as_tensor(a)
    data = a.data ** c

    def bwd(g):
        return (g * c * a.data ** (c - 1),)

    return _node(data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _node(data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _node(data, (a,), lambda g: (g * (1.0 - data * data),))


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _node(data, (a,), lambda g: (g * (a.data > 0),))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def bwd(g):
        mask = np.ones_like(data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        return (g * mask,)

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(data, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _node(data, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, key):
    """Basic (slice/int) indexing; gradients scatter back into zeros."""
    a = as_tensor(a)
    data = a.data[key]

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _node(data, (a,), bwd)


def take_rows(a, idx):
    """Row gather along axis 0 with integer indices (embedding lookup)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    data = a.data[idx]

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(data, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _node(data, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(data, tuple(tensors), bwd)


def gather_windows(a, starts, width):
    """Stack overlapping time windows of a [C, T] tensor into [n, C, width]."""
    a = as_tensor(a)
    starts = list(starts)
    data = np.stack([a.data[:, s : s + width] for s in starts], axis=0)

    def bwd(g):
        z = np.zeros_like(a.data)
        for i, s in enumerate(starts):
            z[:, s : s + width] += g[i]
        return (z,)

    return _node(data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires tensors with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), bwd)


def linear(x, w, b=None):
    """y = x @ w (+ b), broadcasting over leading dims of x."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# softmax family and layer norm (primitives: cheaper tapes than composites)
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    a = as_tensor(a)
    data = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def bwd(g):
        gd = g * data
        dot = gd.sum(axis=axis, keepdims=True)
        gd -= data * dot
        return (gd,)

    return _node(data, (a,), bwd)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    data = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(data).sum(axis=axis, keepdims=True))
    data -= lse

    def bwd(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _node(data, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then affine transform."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead) if lead else g
        ggamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return _node(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# 1-D convolution (cross-correlation) via im2col + BLAS
# ---------------------------------------------------------------------------


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0, dilation: int = 1):
    """Cross-correlate x [C_in, T] with kernels w [C_out, C_in, k].

    Effective kernel span is dilation*(k-1)+1;
    T' = floor((T + 2*padding - span) / stride) + 1.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    c_in, t_in = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in}, kernel {c_in_w}")
    span = dilation * (k - 1) + 1
    t_out = (t_in + 2 * padding - span) // stride + 1
    if t_out < 1:
        raise ShapeError("conv1d output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    s0, s1 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(c_in, k, t_out), strides=(s0, dilation * s1, stride * s1)
    )
    data = np.tensordot(w.data, cols, axes=([1, 2], [0, 1]))
    if b is not None:
        data = data + b.data[:, None]

    def bwd(g):
        gw = np.tensordot(g, cols, axes=([1], [2]))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(w.data, g, axes=([0], [0]))  # [C_in, k, T']
            gxp = np.zeros_like(xp)
            for j in range(k):
                o = j * dilation
                gxp[:, o : o + stride * t_out : stride] += gcols[:, j, :]
            gx = gxp[:, padding : padding + t_in] if padding else gxp
        gb = g.sum(axis=1) if b is not None else None
        if b is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return _node(data, parents, bwd)


# ---------------------------------------------------------------------------
# spec-level helpers
# ---------------------------------------------------------------------------


def backward(loss: Tensor, store=None):
    """Backpropagate a scalar loss into every reachable parameter's grad slot."""
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if loss._bwd is None:
        raise StateError("no forward computation recorded for this loss")
    loss.backward()
