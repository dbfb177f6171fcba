"""Dense tensors with reverse-mode automatic differentiation.

Values live in NumPy arrays. Every differentiable operation records its
parents and a closure mapping the output gradient to one gradient per
parent; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order. Only the operation set needed by the completion model is
provided.

Graphs are thread-confined: the ``no_grad`` switch is thread-local and no
state is shared between graphs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, UsageError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in autodiff.

    ``grad`` is ``None`` until a backward pass reaches the tensor; repeated
    backward passes accumulate into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
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
    return grad.reshape(shape)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None


# -- elementwise ---------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(y > 0, g / (2.0 * y), 0.0)
        return (dx.astype(x.dtype, copy=False),)

    return _result(y, (x,), backward, "sqrt")


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def backward(g):
        ne = np.expand_dims(n, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(ne > 0, x.data / ne, 0.0)
        return ((np.expand_dims(g, axis) * unit).astype(x.dtype, copy=False),)

    return _result(n, (x,), backward, "norm")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# -- softmax / reductions ----------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable, True = keep) sends blocked
    entries to -inf before normalisation."""
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=axis)):
            raise DomainError("softmax: a row is fully masked")
        d = np.where(mask, d, -np.inf)
    shifted = d - np.max(d, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / np.sum(e, axis=axis, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        return ((g - np.sum(g * y, axis=axis, keepdims=True)) * y,)

    return _result(y, (x,), backward, "softmax")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(op: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (all axes when None).

    Max routes its gradient to the first (lowest flat index) maximiser.
    """
    axes = _norm_axis(axis, x.ndim)
    extents = x.shape if axes is None else tuple(x.shape[a] for a in axes)
    if any(n == 0 for n in extents) or x.size == 0:
        raise DomainError(f"{op}: empty reduction axis in shape {x.shape}")
    shape = x.shape
    count = int(np.prod(extents))

    def expand(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape)

    if op == "sum":
        out = np.sum(x.data, axis=axes, keepdims=keepdims)
        return _result(out, (x,), lambda g: (np.array(expand(g)),), "sum")
    if op == "mean":
        out = np.mean(x.data, axis=axes, keepdims=keepdims)
        return _result(out.astype(x.dtype, copy=False), (x,),
                       lambda g: ((expand(g) / count).astype(x.dtype, copy=False),), "mean")
    if op != "max":
        raise UsageError(f"unknown reduction {op!r}")
    if axes is None or len(axes) > 1:
        keep = tuple(i for i in range(x.ndim) if axes is not None and i not in axes)
        red = tuple(range(x.ndim)) if axes is None else axes
        moved = np.transpose(x.data, keep + red).reshape(
            tuple(shape[i] for i in keep) + (-1,))
        arg = np.argmax(moved, axis=-1)
        out = np.take_along_axis(moved, arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(tuple(1 if i in red else shape[i] for i in range(x.ndim)))

        def backward(g):
            gm = np.zeros(moved.shape, dtype=x.dtype)
            np.put_along_axis(gm, arg[..., None], np.reshape(g, arg.shape)[..., None], axis=-1)
            gm = gm.reshape(tuple(shape[i] for i in keep) + tuple(shape[i] for i in red))
            inv = np.argsort(keep + red)
            return (np.transpose(gm, inv),)

        return _result(np.asarray(out), (x,), backward, "max")
    ax = axes[0]
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def backward(g):
        gx = np.zeros(shape, dtype=x.dtype)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, arg, gk, axis=ax)
        return (gx,)

    return _result(out, (x,), backward, "max")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = d.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise UsageError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in xs)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, xs, backward, "concat")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[key]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=x.dtype)
        gx[key] += g
        return (gx,)

    return _result(np.array(out), (x,), backward, "getitem")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: ``x`` (B, N, C), ``idx`` (B, ...) -> (B, ..., C).

    Repeated indices accumulate their gradients.
    """
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_rows: bad shapes x={x.shape}, idx={idx.shape}")
    B, N, C = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise DomainError(f"take_rows: index out of range for {N} rows")
    flat = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).ravel()
    out = x.data.reshape(B * N, C)[flat].reshape(idx.shape + (C,))

    def backward(g):
        gx = np.zeros((B * N, C), dtype=x.dtype)
        np.add.at(gx, flat, g.reshape(-1, C))
        return (gx.reshape(B, N, C),)

    return _result(out, (x,), backward, "take_rows")


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
