"""Reverse-mode differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` holding its inputs and a closure that
pushes the output gradient back to them. Model code works on rank-2 token
matrices; training batches add one leading axis and broadcasting handles it.
"""
import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..constants import LN_EPS, MASK_NEG
from ..exceptions import ConfigurationError, MaskError, NonFiniteError

ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:

    __array_ufunc__ = None

    def __init__(
        self,
        data,
        parents: tuple = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "input",
    ):
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor({self.op}, shape={self.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        grad = _unbroadcast(grad, self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None):
        order = _topological(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: ArrayLike):
        return add(self, other)

    def __radd__(self, other: ArrayLike):
        return add(other, self)

    def __sub__(self, other: ArrayLike):
        return add(self, neg(lift(other)))

    def __rsub__(self, other: ArrayLike):
        return add(other, neg(self))

    def __mul__(self, other: ArrayLike):
        return mul(self, other)

    def __rmul__(self, other: ArrayLike):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)

    def __matmul__(self, other: ArrayLike):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def tanh(self):
        return tanh(self)

    def square(self):
        return mul(self, self)


def lift(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)

    def _backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return Tensor(a.data + b.data, (a, b), _backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: a.accumulate(-g), "neg")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)

    def _backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return Tensor(a.data * b.data, (a, b), _backward, "mul")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = lift(a), lift(b)
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor(a.data @ b.data, (a, b), _backward, "matmul")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: a.accumulate(g * (1.0 - out**2)), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor(out, (a,), lambda g: a.accumulate(g * out * (1.0 - out)), "sigmoid")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    def _backward(g):
        a.accumulate(g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), (a,), _backward, "reshape")


def take(a: Tensor, idx) -> Tensor:
    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return Tensor(a.data[idx], (a,), _backward, "take")


def concat(tensors: Sequence[ArrayLike], axis: int = -2) -> Tensor:
    tensors = [lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate(part)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor(data, tuple(tensors), _backward, "concat")


def broadcast_rows(a: Tensor, lead: tuple) -> Tensor:
    """Tile a token matrix over leading batch axes."""
    target = (*lead, *a.data.shape)

    def _backward(g):
        a.accumulate(g)

    return Tensor(np.broadcast_to(a.data, target).copy(), (a,), _backward, "tile")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ConfigurationError(f"layer norm over {x.shape} with gain {gain.shape}")
    centered = x.data - x.data.mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered**2).mean(-1, keepdims=True) + eps)
    xhat = centered * inv

    def _backward(g):
        gain.accumulate(g * xhat)
        bias.accumulate(g)
        gh = g * gain.data
        gx = inv * (
            gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True)
        )
        x.accumulate(gx)

    out = xhat * gain.data + bias.data
    return Tensor(out, (x, gain, bias), _backward, "layer_norm")


def masked_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int
) -> Tensor:
    """scaled dot-product attention, ``mask[i, j]`` lets query i see key j"""
    mask = np.asarray(mask, dtype=bool)
    n_q, n_k, width = q.shape[-2], k.shape[-2], q.shape[-1]
    if mask.shape != (n_q, n_k):
        raise ConfigurationError(f"mask {mask.shape} does not fit {n_q}x{n_k} scores")
    if k.shape[-1] != width or v.shape[-2:] != k.shape[-2:] or width % heads:
        raise ConfigurationError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    blind = np.flatnonzero(~mask.any(axis=1))
    if blind.size:
        raise MaskError(f"query rows without visible keys: {blind.tolist()}")

    head_dim = width // heads
    scale = 1.0 / math.sqrt(head_dim)
    qh, kh, vh = (_split_heads(t.data, heads) for t in (q, k, v))
    scores = np.where(mask, (qh @ np.swapaxes(kh, -1, -2)) * scale, MASK_NEG)
    weights = np.exp(scores - scores.max(-1, keepdims=True))
    weights /= weights.sum(-1, keepdims=True)
    _count_dots(int(np.prod(qh.shape[:-2])) * n_q * n_k, head_dim)

    def _backward(g):
        gh = _split_heads(g, heads)
        gw = gh @ np.swapaxes(vh, -1, -2)
        gs = weights * (gw - (gw * weights).sum(-1, keepdims=True)) * scale
        q.accumulate(_merge_heads(gs @ kh))
        k.accumulate(_merge_heads(np.swapaxes(gs, -1, -2) @ qh))
        v.accumulate(_merge_heads(np.swapaxes(weights, -1, -2) @ gh))

    out = _merge_heads(weights @ vh)
    return Tensor(out, (q, k, v), _backward, "masked_attention")


class DotProductCounter:
    def __init__(self):
        self.dots = 0
        self.flops = 0

    def add(self, dots: int, head_dim: int):
        self.dots += dots
        self.flops += 2 * dots * head_dim


_COUNTERS: list[DotProductCounter] = []


@contextmanager
def count_dot_products():
    counter = DotProductCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _count_dots(dots: int, head_dim: int):
    for counter in _COUNTERS:
        counter.add(dots, head_dim)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, width = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, width // heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, heads, n, head_dim = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, heads * head_dim)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if id(p) not in seen)
    return order
