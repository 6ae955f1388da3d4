"""A small float64 tensor with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
holding its parents and a closure mapping the output gradient to one
gradient per parent. :meth:`Tensor.backward` orders the recorded graph
topologically (the tape) and runs each closure exactly once.

Broadcasting is deliberately limited to Python scalars and per-channel bias
vectors; anything else must be reshaped explicitly.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ContractError, NonFiniteError, ShapeError

Scalar = Union[int, float]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def normal_cdf_array(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF, shared by GELU and every discretized Gaussian."""
    return special.ndtr(x)


def normal_pdf_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        Only scalar tensors may start a backward pass unless an explicit
        seed gradient is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        tape = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64).reshape(self.shape)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: Scalar):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor):
    order = []
    visited = set()
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None and np.ndim(value) == 0:
        return Tensor._wrap(np.full(like.shape, float(value)))
    return Tensor(value)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``, recording it on the graph if needed."""
    _check_finite(data, op)
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic ---------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data - c, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data / c, (a,), lambda g: (g / c,), "div")
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def power(a: Tensor, exponent: Scalar) -> Tensor:
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return make_result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")
    out = np.power(ad, p)
    return make_result(out, (a,), lambda g: (g * p * np.power(ad, p - 1.0),), "power")


def square(a: Tensor) -> Tensor:
    return power(a, 2)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_result(out, (a,), lambda g: (g / ad,), "log")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return make_result(out, (a,), lambda g: (g * special.expit(ad),), "softplus")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping is active."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),), "relu")


def normal_cdf(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(normal_cdf_array(ad), (a,), lambda g: (g * normal_pdf_array(ad),), "normal_cdf")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    ad = a.data
    cdf = normal_cdf_array(ad)
    return make_result(ad * cdf, (a,), lambda g: (g * (cdf + ad * normal_pdf_array(ad)),), "gelu")


# -- reductions and shape ops -------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes)
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(keep), shape).copy(),)

    return make_result(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axes), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return make_result(out, tuple(tensors), backward, "concat")


def channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[:, start:stop]``."""
    shape = a.shape
    out = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return make_result(out, (a,), backward, "channels")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias of shape (C,) to an NCHW or (N, C) tensor."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias {bias.shape} does not match input {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    sum_axes = (0,) + tuple(range(2, x.ndim))
    out = x.data + bias.data.reshape(view)
    return make_result(out, (x, bias), lambda g: (g, g.sum(axis=sum_axes)), "bias_add")


def tile_spatial(a: Tensor, batch: int, height: int, width: int) -> Tensor:
    """Replicate a (1, C, 1, 1) tensor to (batch, C, height, width)."""
    if a.ndim != 4 or a.shape[0] != 1 or a.shape[2:] != (1, 1):
        raise ShapeError(f"tile_spatial expects (1, C, 1, 1), got {a.shape}")
    c = a.shape[1]
    out = np.broadcast_to(a.data, (batch, c, height, width)).copy()
    return make_result(out, (a,), lambda g: (g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1),), "tile")


def pad_edge(a: Tensor, bottom: int, right: int) -> Tensor:
    """Replicate-pad the bottom and right borders of an NCHW tensor."""
    if bottom == 0 and right == 0:
        return a
    h, w = a.shape[2:]
    out = np.pad(a.data, ((0, 0), (0, 0), (0, bottom), (0, right)), mode="edge")

    def backward(g):
        gx = g[:, :, :h, :w].copy()
        if bottom:
            gx[:, :, h - 1, :] += g[:, :, h:, :w].sum(axis=2)
        if right:
            gx[:, :, :, w - 1] += g[:, :, :h, w:].sum(axis=3)
        if bottom and right:
            gx[:, :, h - 1, w - 1] += g[:, :, h:, w:].sum(axis=(2, 3))
        return (gx,)

    return make_result(out, (a,), backward, "pad_edge")


def crop(a: Tensor, height: int, width: int) -> Tensor:
    shape = a.shape
    out = a.data[:, :, :height, :width].copy()

    def backward(g):
        full = np.zeros(shape)
        full[:, :, :height, :width] = g
        return (full,)

    return make_result(out, (a,), backward, "crop")
