"""A small tape-based reverse-mode differentiator over numpy arrays.

Only the operations the denoiser, the attention network and the losses need
are provided.  Every ``Var`` keeps its parents and a closure that pushes its
output gradient to them; :func:`backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def param(value) -> Var:
    return Var(value, requires_grad=True)


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(value, parents, fn) -> Var:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(value, requires_grad=False)
    return Var(value, parents, fn)


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Var) -> Var:
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def square(a: Var) -> Var:
    return _node(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))


def reduce_sum(a: Var, axis=None, keepdims=False) -> Var:
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), fn)


def reduce_mean(a: Var, axis=None, keepdims=False) -> Var:
    count = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a: Var, shape) -> Var:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var) -> Var:
    return _node(a.value.T, (a,), lambda g: (g.T,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def matmul(a, b) -> Var:
    a, b = lift(a), lift(b)
    return _node(a.value @ b.value, (a, b),
                 lambda g: (_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape),
                            _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)))


def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return _node(s, (a,), fn)


def conv(x, w, flipped: bool) -> Var:
    """Batched periodic convolution; ``x`` is ``(B, C, *spatial)``."""
    x, w = lift(x), lift(w)
    taps = w.shape[2]
    cols = tc.im2col(x.value, taps)

    def fn(g):
        gx = tc.conv_adjoint(g, w.value, flipped) if x.requires_grad else None
        gw = tc.conv_weight_grad(x.value, g, taps, flipped, cols) if w.requires_grad else None
        return gx, gw
    return _node(tc._conv_core(x.value, w.value, flipped, cols), (x, w), fn)


def pool(x: Var, spatial_ndim: int) -> Var:
    return _node(tc.pool(x.value, spatial_ndim), (x,),
                 lambda g: (tc.unpool(g, spatial_ndim),))


def unpool(x: Var, spatial_ndim: int) -> Var:
    return _node(tc.unpool(x.value, spatial_ndim), (x,),
                 lambda g: (tc.pool(g, spatial_ndim),))


def batch_norm_train(x: Var, scale: Var, eps: float = tc.BN_EPS):
    """Training-mode batch norm; returns the output and the batch (mean, var)."""
    v = x.value
    axes = (0,) + tuple(range(2, v.ndim))
    view = (1, -1) + (1,) * (v.ndim - 2)
    mean = v.mean(axis=axes)
    var = v.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mean.reshape(view)) * inv.reshape(view)
    s = scale.value.reshape(view)

    def fn(g):
        gs = (g * xhat).sum(axis=axes)
        gh = g * s
        gx = inv.reshape(view) * (gh - gh.mean(axis=axes, keepdims=True)
                                  - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx, gs
    return _node(xhat * s, (x, scale), fn), mean, var


def backward(root: Var, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf parameter."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp
