"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded define-by-run on the innermost active :class:`Tape`.
Outside a tape every op is evaluated eagerly and nothing is recorded, which is
what inference uses.

    with Tape() as tape:
        w = param(np.ones(3), "w")
        loss = (w * w).sum()
    grads = backward(tape, loss)   # {"w": array([2., 2., 2.])}
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "name", "requires_grad", "parents", "grad_fn", "__weakref__")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor({self.data!r}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Append-only record of differentiable ops, in evaluation order."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Tensor] = []

    @classmethod
    def active(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        self._local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._local.stack.pop()


def param(data, name: str) -> Tensor:
    """A named leaf whose gradient ``backward`` reports."""
    return Tensor(np.array(data, dtype=np.float64), name=name, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def vector(values) -> Tensor:
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 1 or data.size == 0:
        raise ShapeError("vector", data.shape)
    if not np.all(np.isfinite(data)):
        raise ValueError("vector entries must be finite")
    return Tensor(data)


def matrix(values) -> Tensor:
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 2 or data.size == 0:
        raise ShapeError("matrix", data.shape)
    if not np.all(np.isfinite(data)):
        raise ValueError("matrix entries must be finite")
    return Tensor(data)


def _record(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.grad_fn = grad_fn
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient flows where the floor binds."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor) if floor > 0 else x.data
    live = x.data >= floor if floor > 0 else np.ones(x.shape, dtype=bool)
    with np.errstate(divide="ignore"):
        y = np.log(clamped)
    return _record(y, (x,), lambda g: (np.where(live, g / clamped, 0.0),))


# -- reductions and shape ---------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(y), (x,), grad_fn)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / count)


def amax(x, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; on exact ties the gradient goes to the lowest index."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("amax", x.shape)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def grad_fn(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _record(y, (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _record(y, (x,), lambda g: (g.reshape(x.shape),))


def expand(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    y = x.data[index]

    def grad_fn(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(y), (x,), grad_fn)


def take(x, indices, axis: int) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    y = np.take(x.data, indices, axis=axis)

    def grad_fn(g):
        out = np.zeros(x.shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _record(y, (x,), grad_fn)


def pick(x, labels) -> Tensor:
    """Select ``x[..., labels[...]]`` along the last axis."""
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != x.shape[:-1]:
        raise ShapeError("pick", x.shape, labels.shape)
    idx = labels[..., None]
    y = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def grad_fn(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _record(y, (x,), grad_fn)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(y, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(x.shape for x in xs)) from None
    n = len(xs)
    return _record(y, xs, lambda g: tuple(np.squeeze(p, axis) for p in np.split(g, n, axis=axis)))


# -- linear algebra ---------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T (+ bias)`` over the last axis of ``x``; leading axes batch."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", weight.shape, x.shape)
    y = x.data @ weight.data.T

    def grad_fn(g):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    out = _record(y, (x, weight), grad_fn)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear bias", weight.shape, bias.shape)
        out = add(out, bias)
    return out


def matvec(W, x) -> Tensor:
    W, x = as_tensor(W), as_tensor(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError("matvec", W.shape, x.shape)
    return linear(x, W)


def dot(a, b) -> Tensor:
    """Inner product over the last axis (broadcast over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError("dot", a.shape, b.shape)
    return tsum(mul(a, b), axis=-1)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), grad_fn)


tanh_elem = tanh


# -- reverse pass -----------------------------------------------------------

def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` w.r.t. named leaves.

    With ``wrt`` the map covers exactly those leaves (zeros when unused);
    otherwise every named leaf the tape touched.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            if parent.grad_fn is None:
                leaves[id(parent)] = parent
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if loss.grad_fn is None and loss.requires_grad:
        leaves[id(loss)] = loss

    if wrt is None:
        targets = [t for t in leaves.values() if t.name is not None]
    else:
        targets = list(wrt)
    out: dict[str, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        out[t.name] = np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out
