"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation on a ``Tensor`` that has a gradient-requiring input records
its parents and a vector-Jacobian product; ``backward()`` walks that tape in
reverse topological order. All values are float64.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from forestlpr.exceptions import NumericError, TapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'enabled', True)


@contextmanager
def no_grad():
    """Run a block without recording operations on the tape (per thread)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """An array value plus, when it depends on trainable inputs, its place on the tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = ''

    @classmethod
    def _record(cls, data, parents, op, vjp) -> Tensor:
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
            out._op = op
        return out

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r}{label})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # arithmetic

    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._record(self.data + other.data, (self, other), 'add',
                              lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._record(-self.data, (self,), 'neg', lambda g: (-g,))

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._record(self.data - other.data, (self, other), 'sub',
                              lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._record(a * b, (self, other), 'mul',
                              lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._record(a / b, (self, other), 'div',
                              lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.ndim == 1:
            return (self.reshape(1, -1) @ other).reshape(other.shape[:-2] + other.shape[-1:])
        if other.ndim == 1:
            return (self @ other.reshape(-1, 1)).reshape(self.shape[:-1])
        a, b = self.data, other.data

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._record(a @ b, (self, other), 'matmul', vjp)

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    def __pow__(self, exponent: float):
        x = self.data
        exponent = float(exponent)
        return Tensor._record(x ** exponent, (self,), 'pow',
                              lambda g: (g * exponent * x ** (exponent - 1.0),))

    # reductions and shape

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._record(self.data.sum(axis=axis, keepdims=keepdims), (self,), 'sum', vjp)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def max(self, axis: int):
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        x = self.data
        index = np.expand_dims(np.argmax(x, axis=axis), axis)

        def vjp(g):
            full = np.zeros_like(x)
            np.put_along_axis(full, index, np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor._record(np.take_along_axis(x, index, axis=axis).squeeze(axis), (self,), 'max', vjp)

    def clamp_min(self, lower: float):
        """max(x, lower); the gradient passes only where x > lower."""
        x = self.data
        return Tensor._record(np.maximum(x, lower), (self,), 'clamp', lambda g: (g * (x > lower),))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._record(self.data.reshape(shape), (self,), 'reshape', lambda g: (g.reshape(original),))

    def transpose(self, *axes):
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._record(self.data.transpose(axes), (self,), 'transpose', lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._record(self.data[index], (self,), 'index', vjp)

    # tape

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every trainable leaf on the tape."""
        for leaf, value in _backpropagate(self, grad).items():
            leaf.grad = value if leaf.grad is None else leaf.grad + value


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _backpropagate(output: Tensor, seed=None) -> dict:
    if not output.requires_grad:
        raise TapeError("output does not depend on any trainable tensor")
    if seed is None:
        if output.data.size != 1:
            raise TapeError("backward() without a seed gradient needs a scalar output")
        seed = np.ones_like(output.data)
    pending = {id(output): np.asarray(seed, dtype=np.float64)}
    leaves = {}
    for node in reversed(_topological_order(output)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = grad
            continue
        for parent, parent_grad in zip(node._parents, node._vjp(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    return leaves


def gradients(output: Tensor, inputs) -> list[np.ndarray]:
    """
    d(output)/d(input) for each input, without touching ``.grad``.

    Raises TapeError if an input was never used to compute ``output``.
    """
    on_tape = {id(node) for node in _topological_order(output)} if output.requires_grad else set()
    for tensor in inputs:
        if id(tensor) not in on_tape:
            label = tensor.name or repr(tensor)
            raise TapeError(f"{label} is not on the tape of this output")
    leaves = _backpropagate(output)
    return [leaves.get(tensor, np.zeros_like(tensor.data)) for tensor in inputs]


# composite and multi-input primitives

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._record(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat',
                          lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    return concat([_as_tensor(t).reshape(_expanded_shape(_as_tensor(t).shape, axis)) for t in tensors], axis=axis)


def _expanded_shape(shape: tuple, axis: int) -> tuple:
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    return shape[:axis] + (1,) + shape[axis:]


def broadcast_to(tensor: Tensor, shape: tuple) -> Tensor:
    original = tensor.shape
    return Tensor._record(np.broadcast_to(tensor.data, shape), (tensor,), 'broadcast',
                          lambda g: (_unbroadcast(g, original),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=axis, keepdims=True)
    return Tensor._record(y, (x,), 'softmax',
                          lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    gamma = weight.data

    def vjp(g):
        g_norm = g * gamma
        gx = inv_std * (g_norm - g_norm.mean(axis=-1, keepdims=True)
                        - normalized * (g_norm * normalized).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * normalized, weight.shape), _unbroadcast(g, bias.shape)

    return Tensor._record(normalized * gamma + bias.data, (x, weight, bias), 'layer_norm', vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)
    return Tensor._record(v * cdf, (x,), 'gelu', lambda g: (g * (cdf + v * pdf),))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ||x||; a zero-norm vector has no direction and raises NumericError."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise NumericError("cannot L2-normalize a zero or non-finite vector")
    y = x.data / norm
    return Tensor._record(y, (x,), 'l2_normalize',
                          lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,))


def hinge(x: Tensor) -> Tensor:
    """max(x, 0) with subgradient 0 at the kink."""
    return x.clamp_min(0.0)
