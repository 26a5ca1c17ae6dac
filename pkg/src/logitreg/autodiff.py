"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new immutable :class:`Tensor`. When at least one
input has ``requires_grad`` set (and recording is not disabled with
:func:`no_grad`), the output keeps a reference to its inputs together with a
closure that maps the output cotangent to input cotangents. :func:`grad` walks
that graph once in reverse topological order.

Only the primitives the rest of the package needs are provided: elementwise
arithmetic with broadcasting, matmul, channels-last "same" convolution,
average pooling, relu/exp/log, reductions and the softmax family.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "constant",
    "no_grad",
    "grad",
    "backward_grads",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "square",
    "sum",
    "mean",
    "reshape",
    "conv2d",
    "avg_pool2d",
    "transpose",
    "softmax",
    "log_softmax",
    "sum_squares",
    "l2_norm",
    "sign",
    "pass_counts",
    "count_passes",
]


class ShapeError(ValueError):
    """Operands do not satisfy an operation's shape rules."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("recording", default=True)

# forward/backward pass tallies; models bump "forward", grad() bumps "backward"
pass_counts: Counter = Counter()


@contextlib.contextmanager
def count_passes():
    """Reset the global pass counter and yield it."""
    pass_counts.clear()
    yield pass_counts


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for operations run inside the block."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """Immutable float64 array with an optional link into a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, arr: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr, op)
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.op = op
        if _recording.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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

    def detach(self) -> Tensor:
        return constant(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data if not data.requires_grad else Tensor(data.data)
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, "mul", (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, "log", (a,), lambda g: (g / a.data,))


def sign(x) -> np.ndarray:
    """Elementwise sign with ``sign(0) == 0``. Not differentiable; returns an array."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return np.sign(data)


# -- shape and reductions ----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def backward(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), "sum", (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis), 1.0 / count)


def sum_squares(a, axis=None) -> Tensor:
    return sum(square(a), axis)


def l2_norm(a, axis=None) -> Tensor:
    """Euclidean norm. The gradient at exactly zero is taken as zero."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sqrt((a.data * a.data).sum(axis=axes))

    def backward(g):
        norm = np.expand_dims(out, axes) if axes else out
        gg = np.expand_dims(g, axes) if axes else g
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, a.data / safe, 0.0) * gg,)

    return Tensor._result(np.asarray(out, dtype=np.float64), "l2_norm", (a,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D matrix product ``a @ b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return Tensor._result(out, "matmul", (a, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded "same" patches of NHWC ``x`` as rows of shape (N*H*W, kh*kw*C)."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
    xp[:, ph : ph + h, pw : pw + w] = x
    cols = np.empty((n, h, w, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + h, j : j + w, :]
    return cols.reshape(n * h * w, kh * kw * c)


def conv2d(x, w) -> Tensor:
    """Stride-1 convolution with zero "same" padding, channels-last.

    ``x`` is (N, H, W, C) and ``w`` is (kh, kw, C, O) with odd kernel extents.
    The input gradient is itself a "same" convolution of the output gradient
    with the spatially flipped, channel-swapped kernel.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    cols = _im2col(x.data, kh, kw)
    out = (cols @ w.data.reshape(kh * kw * c, o)).reshape(n, h, wd, o)

    def backward(g):
        gw = gx = None
        if w.requires_grad:
            gw = (cols.T @ g.reshape(n * h * wd, o)).reshape(w.shape)
        if x.requires_grad:
            flipped = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * o, c)
            gx = (_im2col(g, kh, kw) @ flipped).reshape(x.shape)
        return gx, gw

    return Tensor._result(out, "conv2d", (x, w), backward)


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` average pooling of channels-last (N, H, W, C) input."""
    x = _as_tensor(x)
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial extent {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def backward(g):
        up = np.broadcast_to(g[:, :, None, :, None, :] / (k * k), (n, h // k, k, w // k, k, c))
        return (up.reshape(x.shape),)

    return Tensor._result(out, "avg_pool2d", (x,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


# -- softmax family --------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, "log_softmax", (a,), backward)


# -- backward pass -----------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Inputs the loss does not depend on get an all-zero gradient. The graph is
    not consumed, so ``grad`` may be called repeatedly on the same loss.
    """
    wrt = list(wrt)
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    pass_counts["backward"] += 1
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        _check_finite(g, "backward")
        out.append(np.asarray(g, dtype=np.float64).reshape(t.shape))
    return out


def backward_grads(loss: Tensor, wrt) -> dict:
    """Like :func:`grad` but keyed: ``wrt`` is a mapping name -> Tensor."""
    names = list(wrt)
    return dict(zip(names, grad(loss, [wrt[k] for k in names])))


def finite_difference_gradient(fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``point``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x.copy()))
        flat[i] = orig - h
        fm = float(fn(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)
