"""Reverse-mode gradient tape over dense numpy arrays.

Every op returns a new ``Tensor``; when any input requires a gradient the
result records its parents and a closure mapping the upstream gradient to one
gradient per parent. ``Tensor.backward`` sweeps the recorded graph in reverse
topological order and accumulates into the ``grad`` of every leaf that
requires one.
"""

from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
from scipy.special import expit

from .errors import ShapeError, TapeError

DTYPE = np.float64

Grads = Sequence[np.ndarray | None]
BackwardFn = Callable[[np.ndarray], Grads]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str = "",
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g), strict=True):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            ps = state.get(id(parent))
            if ps == 1:
                raise TapeError("cycle in gradient tape")
            if ps is None:
                stack.append((parent, False))
    return order


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: Any, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def custom(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Record a hand-written node; ``backward`` returns one gradient per parent."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return custom(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return custom(
        a.data @ b.data,
        (a, b),
        lambda g: (
            unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ),
    )


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    return custom(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),),
    )


def mean(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)
    return custom(
        out,
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return custom(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return custom(out, (x,), lambda g: (g * 0.5 / out,))


def tabs(x: Tensor) -> Tensor:
    return custom(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return custom(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    return custom(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def gelu(x: Tensor) -> Tensor:
    k = np.sqrt(2.0 / np.pi)
    inner = k * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> Grads:
        d_inner = k * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return custom(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return custom(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return custom(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale to unit L2 norm along ``axis``; ``eps`` softens the zero vector."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps * eps)
    out = x.data / n
    return custom(
        out,
        (x,),
        lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,),
    )


def vector_norm(x: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=axis))
    safe = np.where(n > 0.0, n, 1.0)

    def backward(g: np.ndarray) -> Grads:
        scale = np.where(n > 0.0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)

    return custom(n, (x,), backward)


def huber(x: Tensor, delta: float) -> Tensor:
    a = np.abs(x.data)
    quad = a <= delta
    out = np.where(quad, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))
    return custom(
        out,
        (x,),
        lambda g: (g * np.where(quad, x.data, delta * np.sign(x.data)),),
    )


def where(cond: np.ndarray, a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return custom(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (
            unbroadcast(np.where(cond, g, 0.0), a.shape),
            unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def concat(xs: Sequence[Any], axis: int = 0) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0, *sizes])

    def backward(g: np.ndarray) -> Grads:
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(ts))
        ]

    return custom(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(xs: Sequence[Any], axis: int = 0) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    return custom(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: [np.take(g, i, axis=axis) for i in range(len(ts))],
    )


def getitem(x: Tensor, index: Any) -> Tensor:
    def backward(g: np.ndarray) -> Grads:
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return custom(x.data[index], (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return custom(
        x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),)
    )


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(perm))
    return custom(
        np.transpose(x.data, perm), (x,), lambda g: (np.transpose(g, inverse),)
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    return custom(
        np.broadcast_to(x.data, tuple(shape)).copy(),
        (x,),
        lambda g: (unbroadcast(g, x.shape),),
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g: np.ndarray) -> Grads:
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom(xhat * gain.data + bias.data, (x, gain, bias), backward)
