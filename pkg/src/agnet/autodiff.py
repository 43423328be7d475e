"""Minimal reverse-mode automatic differentiation on numpy arrays.

The engine covers exactly the operations the network needs: elementwise
arithmetic with broadcasting, dense and 2-d convolution layers, relu,
softmax, log, reductions, reshapes and row gathers.  Every differentiable
operation here is covered by a central-finite-difference test.

Graph nodes are only recorded while at least one input requires a
gradient, so inference passes carry no bookkeeping overhead.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Array node in a computation graph.

    ``data`` is always a numpy array.  After ``backward()`` every node that
    participates in the graph with ``requires_grad=True`` holds the gradient
    of the scalar output in ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # Make numpy defer mixed expressions to the reflected operators below.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

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
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(output)/d(node) into ``grad`` for every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for parent in node._parents:
                visit(parent)
            topo.append(node)

        visit(self)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # Operator sugar.  Non-Tensor operands become constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None):
    """Wrap ``x`` as a constant Tensor unless it already is one."""
    if isinstance(x, Tensor):
        if dtype is not None and x.data.dtype != dtype:
            raise TypeError(f"tensor has dtype {x.data.dtype}, expected {dtype}")
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum-reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: [(a, _unbroadcast(g, a.shape)),
                            (b, _unbroadcast(g, b.shape))])


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: [(a, _unbroadcast(g, a.shape)),
                            (b, _unbroadcast(-g, b.shape))])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: [(a, _unbroadcast(g * b.data, a.shape)),
                            (b, _unbroadcast(g * a.data, b.shape))])


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: [(x, g * mask)])


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: [(x, g / x.data)])


def clip_min(x, lo):
    """max(x, lo); gradient passes only where x > lo."""
    x = as_tensor(x)
    mask = x.data > lo
    return _node(np.maximum(x.data, lo), (x,), lambda g: [(x, g * mask)])


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,),
                 lambda g: [(x, g.reshape(x.shape))])


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(tensors, pieces))

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, back)


def tsum(x, axis=None):
    x = as_tensor(x)
    y = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.shape).copy())]
        g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape).copy())]

    return _node(y, (x,), back)


def tmean(x, axis=None):
    x = as_tensor(x)
    y = x.data.mean(axis=axis)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape) / count)]

    return _node(y, (x,), back)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return _node(y, (x,), back)


def take_per_row(x, index):
    """y[i] = x[i, index[i]] for a 2-d tensor."""
    x = as_tensor(x)
    idx = np.asarray(index)
    rows = np.arange(x.shape[0])
    y = x.data[rows, idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return [(x, gx)]

    return _node(y, (x,), back)


def linear(x, weight, bias):
    """y = x @ weight.T + bias, with x (N, K), weight (M, K), bias (M,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    y = x.data @ weight.data.T + bias.data

    def back(g):
        return [(x, g @ weight.data),
                (weight, g.T @ x.data),
                (bias, g.sum(axis=0))]

    return _node(y, (x, weight, bias), back)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride,
                                 j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    gcols = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride,
               j:j + stride * ow:stride] += gcols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def conv2d(x, weight, bias, stride=1, pad=0):
    """2-d convolution on (N, C, H, W) input with (OC, C, kh, kw) kernel."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    oc, ic, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != ic:
        raise ValueError(f"conv2d input shape {x.shape} does not match "
                         f"kernel {weight.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w2 = weight.data.reshape(oc, -1)
    out = np.matmul(w2, cols) + bias.data[:, None]
    out = out.reshape(x.shape[0], oc, oh, ow)

    def back(g):
        g2 = g.reshape(g.shape[0], oc, -1)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g2)
        gx = _col2im(gcols, x.shape, kh, kw, stride, pad, oh, ow)
        return [(x, gx), (weight, gw), (bias, gb)]

    return _node(out, (x, weight, bias), back)


def global_avg_pool(x):
    """Mean over the spatial axes of an (N, C, H, W) tensor -> (N, C)."""
    return tmean(x, axis=(2, 3))
