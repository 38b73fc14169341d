"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A Tensor wraps a numpy array plus a record of how it was computed. Calling
``backward`` on a scalar root walks the tape in reverse topological order and
accumulates gradients (summing across fan-out). The op set is intentionally
small: just what the encoder/decoder/head architectures need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DoubleBackward, NonFiniteGradient, NonScalarRoot, ShapeMismatch


class Tensor:
    """Node on the tape: a value, an optional gradient, and its parents."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Accumulate gradients of self w.r.t. every reachable node."""
        if self.data.size != 1:
            raise NonScalarRoot(f"backward root must be scalar, got shape {self.data.shape}")
        if self.grad is not None:
            raise DoubleBackward("backward() already ran from this root; reset gradients first")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    # copy: g may alias a vjp-internal buffer or a view
                    parent.grad = np.array(g, dtype=parent.data.dtype)
                else:
                    parent.grad += g


def _toposort(root):
    """Reverse topological order (root first), iterative to spare the stack."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order[::-1]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return Tensor(out, (a, b), vjp)


def powc(a, exponent):
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    out = a.data**exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor(out, (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    ax = tuple(axes) if axes is not None else tuple(range(a.data.ndim))[::-1]
    inv = np.argsort(ax)
    return Tensor(a.data.transpose(ax), (a,), lambda g: (g.transpose(inv),))


def swap_last2(a):
    a = as_tensor(a)
    return Tensor(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, alpha=0.01):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, alpha)
    return Tensor(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor(out, (a,), vjp)


def logsumexp(a, axis=-1, keepdims=False):
    """Stable log-sum-exp; the max shift is treated as a constant."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return Tensor(out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tensors, vjp)


def take(a, key):
    """Basic slicing / integer indexing with scatter-add gradient."""
    a = as_tensor(a)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, key, g)  # integer arrays may repeat indices
        else:
            out[key] += g
        return (out,)

    return Tensor(a.data[key], (a,), vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    return Tensor(
        np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),)
    )


def stop_gradient(a):
    a = as_tensor(a)
    return Tensor(a.data.copy(), (a,), lambda g: (None,))


def mse(a, b):
    """Mean squared error, a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        d = g * 2.0 * diff / n
        return d, -d

    return Tensor(np.mean(diff * diff), (a, b), vjp)


# ---------------------------------------------------------------------------
# parameters and AdamW


@dataclass
class Parameter:
    """A trainable leaf tensor plus its AdamW state."""

    tensor: Tensor
    first_moment: np.ndarray = field(default=None)
    second_moment: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if self.first_moment is None:
            self.first_moment = np.zeros_like(self.tensor.data)
        if self.second_moment is None:
            self.second_moment = np.zeros_like(self.tensor.data)


def zero_grads(params):
    for p in params.values():
        p.tensor.grad = None


def adamw_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update on every parameter with a gradient.

    Weight decay is applied directly to the parameter values and never enters
    the moment estimates.
    """
    for name, p in params.items():
        g = p.tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient on parameter {name!r}")
        p.step_count += 1
        p.first_moment = beta1 * p.first_moment + (1.0 - beta1) * g
        p.second_moment = beta2 * p.second_moment + (1.0 - beta2) * g * g
        m_hat = p.first_moment / (1.0 - beta1**p.step_count)
        v_hat = p.second_moment / (1.0 - beta2**p.step_count)
        p.tensor.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.tensor.data)
