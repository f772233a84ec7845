"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a closure that accumulates gradients,
so a single `backward()` on a scalar loss fills the `grad` slot of every
reachable tensor with `requires_grad=True`. Broadcasting follows numpy rules;
gradients are summed back over broadcast axes.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphNotRecorded

__all__ = [
    "Tensor", "constant", "matmul", "relu", "sigmoid", "exp", "log",
    "sqrt", "cos", "clamp", "logsumexp",
]


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum over axes that were size-1 in the original
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph plumbing -----------------------------------------------------

    @classmethod
    def _node(cls, data, parents, backward):
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Reverse pass from a scalar node; fills grads of all parameters."""
        if self.data.size != 1:
            raise GraphNotRecorded("backward() requires a scalar loss node")
        if not self.requires_grad:
            raise GraphNotRecorded("loss does not depend on any parameter")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor._node(-self.data, (self,), backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data ** 2,
                                          other.data.shape))

        return Tensor._node(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** k

        def backward(g):
            if self.requires_grad:
                self._accum(g * k * self.data ** (k - 1))

        return Tensor._node(out_data, (self,), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions / reshaping ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._node(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        old_shape = self.data.shape

        def backward(g):
            if self.requires_grad:
                self._accum(g.reshape(old_shape))

        return Tensor._node(out_data, (self,), backward)

    def transpose(self, ax0=-2, ax1=-1):
        out_data = np.swapaxes(self.data, ax0, ax1)

        def backward(g):
            if self.requires_grad:
                self._accum(np.swapaxes(g, ax0, ax1))

        return Tensor._node(out_data, (self,), backward)


def constant(x):
    """Non-differentiable tensor wrapper."""
    return Tensor(x)


def matmul(a, b):
    """np.matmul with broadcasting; operands must be at least 2-D."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor._node(out_data, (a, b), backward)


def relu(x):
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    return Tensor._node(out_data, (x,), backward)


def sigmoid(x):
    out_data = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500.0, 500.0)))

    def backward(g):
        if x.requires_grad:
            x._accum(g * out_data * (1.0 - out_data))

    return Tensor._node(out_data, (x,), backward)


def exp(x):
    out_data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g * out_data)

    return Tensor._node(out_data, (x,), backward)


def log(x):
    out_data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(g / x.data)

    return Tensor._node(out_data, (x,), backward)


def sqrt(x):
    """Square root with a guarded derivative at 0 (subgradient taken as 0)."""
    out_data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            safe = np.where(out_data > 1e-150, out_data, np.inf)
            x._accum(g * 0.5 / safe)

    return Tensor._node(out_data, (x,), backward)


def cos(x):
    out_data = np.cos(x.data)

    def backward(g):
        if x.requires_grad:
            x._accum(-g * np.sin(x.data))

    return Tensor._node(out_data, (x,), backward)


def absolute(x):
    """|x| as relu(x) + relu(-x); subgradient 0 at the origin."""
    return relu(x) + relu(-x)


def clamp(x, lo, hi):
    """Elementwise clip to [lo, hi]; gradient passes only strictly inside."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out_data = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad:
            inside = (x.data > lo) & (x.data < hi)
            x._accum(g * inside)

    return Tensor._node(out_data, (x,), backward)


def logsumexp(x, axis, temperature=1.0):
    """Smooth maximum: temperature * logsumexp(x / temperature) along `axis`."""
    t = float(temperature)
    shift = np.max(x.data / t, axis=axis, keepdims=True)
    z = exp(x * (1.0 / t) - Tensor(shift))
    return (log(z.sum(axis=axis)) + Tensor(np.squeeze(shift, axis=axis))) * t
