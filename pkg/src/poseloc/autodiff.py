"""Minimal tape-free reverse-mode differentiation over numpy arrays.

Each ``Var`` remembers its parents and a closure that pushes its gradient to
them; ``grad`` walks the graph in reverse topological order.  Only the ops
the encoder and losses need are provided.

Subgradient conventions: d|x|/dx = 0 at x = 0, d max(x, 0)/dx = 0 at x = 0,
and the gradient of a Euclidean norm at the zero vector is 0.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var({self.value!r})"


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(a.value + b.value, (a, b), bw)


def neg(a):
    a = as_var(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Var(a.value * b.value, (a, b), bw)


def reciprocal(a):
    a = as_var(a)
    out = 1.0 / a.value
    return Var(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b):
    """(B, n) @ (n, m); gradients for 2-D operands or a 1-D left operand."""
    a, b = as_var(a), as_var(b)

    def bw(g):
        av = a.value if a.value.ndim > 1 else a.value[None, :]
        gv = g if g.ndim > 1 else g[None, :]
        ga = gv @ b.value.T
        return ga.reshape(a.shape), av.T @ gv

    return Var(a.value @ b.value, (a, b), bw)


def tanh(a):
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def absolute(a):
    a = as_var(a)
    return Var(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def relu(a):
    a = as_var(a)
    return Var(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),))


def sum_(a, axis=None):
    a = as_var(a)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Var(a.value.sum(axis=axis), (a,), bw)


def mean(a, axis=None):
    a = as_var(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def norm(a, axis=-1):
    """Euclidean norm along ``axis`` with a zero gradient at the origin."""
    a = as_var(a)
    out = np.sqrt(np.sum(a.value * a.value, axis=axis))

    def bw(g):
        o = np.expand_dims(out, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(o > 0, np.expand_dims(g, axis) / o, 0.0)
        return (scale * a.value,)

    return Var(out, (a,), bw)


def concat(parts, axis=-1):
    parts = [as_var(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw)


def getitem(a, idx):
    a = as_var(a)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), bw)


def grad(loss: Var):
    """Populate ``.grad`` on every node reachable from a scalar ``loss``."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.backward_fn(node.grad)):
            p.grad = g if p.grad is None else p.grad + g
