"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor records its parents and a closure that maps the output gradient to
parent gradient contributions; backward() runs the tape in reverse
topological order. Only the operations needed by the transformer classifier
are provided.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo = []
        seen = set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t.parents:
                visit(p)
            topo.append(t)

        visit(self)
        for t in topo:
            t.grad = None
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is None or t.grad is None:
                continue
            for parent, contribution in t._backward(t.grad):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = contribution.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += contribution

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` along broadcast axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return Tensor(out_data, (a, b), bwd)


def scale(a: Tensor, k: float) -> Tensor:
    def bwd(g):
        return ((a, g * k),)

    return Tensor(a.data * k, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return Tensor(out_data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return Tensor(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        return ((a, g.transpose(inv)),)

    return Tensor(a.data.transpose(axes), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return ((a, g * mask),)

    return Tensor(a.data * mask, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU; smooth, so finite-difference checks are clean."""
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner)),)

    return Tensor(out_data, (a,), bwd)


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def bwd(g):
        return ((a, np.repeat(np.expand_dims(g / n, axis), n, axis=axis)),)

    return Tensor(out_data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically shifted."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((a, y * (g - inner)),)

    return Tensor(y, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return ((x, dx), (gain, dgain), (bias, dbias))

    return Tensor(out_data, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    factor = 1.0 / (1.0 - p)

    def bwd(g):
        return ((x, g * keep * factor),)

    return Tensor(x.data * keep * factor, (x,), bwd)


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch; labels are integer class indices."""
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    n = z.shape[0]
    picked = z[np.arange(n), labels][:, None]
    loss = float((logsumexp - picked).mean())
    probs = np.exp(z - logsumexp)

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return ((logits, g * grad / n),)

    return Tensor(np.asarray(loss, dtype=z.dtype), (logits,), bwd)
