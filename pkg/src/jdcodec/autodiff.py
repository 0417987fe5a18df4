"""Tape-based reverse-mode differentiation over dense numpy arrays.

Only the handful of operations the codec network needs are provided.  A
:class:`Tape` is activated as a context manager; every op whose inputs
require gradients is appended to it, and :func:`backward` replays the tape
in reverse.  Outside an active tape ops run eagerly with no bookkeeping,
which is how inference is done.

Arithmetic is carried out in float64.  Parameters may be stored as float32;
they are promoted on use.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DIV_EPS = 1e-9
SQRT_EPS = 1e-12

_local = threading.local()


class ShapeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus an optional gradient.

    Leaves created by the user with ``requires_grad=True`` accumulate into
    ``.grad`` on every :func:`backward` call; zero them explicitly between
    steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of differentiable ops; parents always precede children."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        out.node_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append((out, parents, backward_fn))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def make_op(op: str, out_data: np.ndarray, parents: Sequence, backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it if any parent needs grads.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per parent, in order.  Used by the ops below and by fused ops
    defined elsewhere in the package.
    """
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, tuple(parents), backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # only scalar broadcasting is allowed, so this is either identity or a full sum
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    out = _f64(a) + _f64(b)
    sa, sb = a.shape, b.shape
    return make_op("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    out = _f64(a) - _f64(b)
    sa, sb = a.shape, b.shape
    return make_op("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = _f64(a), _f64(b)

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return make_op("mul", ad * bd, (a, b), backward)


def div(a, b, eps: float = DIV_EPS) -> Tensor:
    """``a / max(b, eps)``; the denominator is clamped from below."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = _f64(a), _f64(b)
    den = np.maximum(bd, eps)
    out = ad / den

    def backward(g):
        ga = g / den
        gb = np.where(bd > eps, -g * out / den, 0.0)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op("div", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scale", _f64(a) * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op("add_scalar", _f64(a) + float(c), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = _f64(a)
    return make_op("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sqrt(a: Tensor, eps: float = SQRT_EPS) -> Tensor:
    """Square root of ``max(a, eps)``."""
    ad = _f64(a)
    out = np.sqrt(np.maximum(ad, eps))
    return make_op("sqrt", out, (a,), lambda g: (np.where(ad > eps, g * 0.5 / out, 0.0),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    ad = _f64(a)
    return make_op("clamp_min", np.maximum(ad, lo), (a,), lambda g: (np.where(ad >= lo, g, 0.0),))


def log(a: Tensor, floor: float = 1e-300) -> Tensor:
    ad = _f64(a)
    safe = np.maximum(ad, floor)
    return make_op("log", np.log(safe), (a,), lambda g: (np.where(ad >= floor, g / safe, 0.0),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(_f64(a))
    return make_op("exp", out, (a,), lambda g: (g * out,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return make_op("reshape", _f64(a).reshape(shape), (a,), lambda g: (g.reshape(old),))


# ------------------------------------------------------------------ reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = _f64(a)
    shape = a.shape
    return make_op("sum", np.asarray(ad.sum(dtype=np.float64)), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    ad = _f64(a)
    shape, n = a.shape, a.size
    return make_op("mean", np.asarray(ad.mean(dtype=np.float64)), (a,), lambda g: (np.full(shape, float(g) / n),))


def sum_per_sample(a: Tensor) -> Tensor:
    """Sum over every axis except the leading batch axis; result shape (n,)."""
    ad = _f64(a)
    shape = a.shape
    out = ad.reshape(shape[0], -1).sum(axis=1)

    def backward(g):
        return (np.broadcast_to(g.reshape((shape[0],) + (1,) * (len(shape) - 1)), shape).copy(),)

    return make_op("sum_per_sample", out, (a,), backward)


# ---------------------------------------------------------------- convolution


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)


def _patches(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of a pre-padded input, shape (n, c*k*k, ho*wo)."""
    n, c = xp.shape[:2]
    return np.ascontiguousarray(_windows(xp, k, stride, ho, wo)).reshape(n, c * k * k, ho * wo)


def _scatter(cols: np.ndarray, k: int, stride: int, out_shape: tuple) -> np.ndarray:
    """Adjoint of :func:`_patches`: add (n, c, k, k, ho, wo) patches into an image."""
    n, c, _, _, ho, wo = cols.shape
    span = (k - 1) // stride
    out = np.zeros(out_shape)
    # one dense accumulator per stride phase keeps the inner adds contiguous
    for p in range(min(stride, k)):
        for q in range(min(stride, k)):
            acc = np.zeros((n, c, ho + span, wo + span))
            for i in range(p, k, stride):
                for j in range(q, k, stride):
                    di, dj = i // stride, j // stride
                    acc[:, :, di : di + ho, dj : dj + wo] += cols[:, :, i, j]
            dst = out[:, :, p::stride, q::stride]
            hh, ww = min(dst.shape[2], acc.shape[2]), min(dst.shape[3], acc.shape[3])
            dst[:, :, :hh, :ww] += acc[:, :, :hh, :ww]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding.  ``w`` has shape (c_out, c_in, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight {w.shape}")
    if b is not None and b.shape != (co,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape}, expected ({co},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    xd = _f64(x)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    w2 = _f64(w).reshape(co, -1)
    cols = _patches(xp, k, stride, ho, wo)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)
    if b is not None:
        out += _f64(b).reshape(1, co, 1, 1)

    def backward(g):
        g3 = g.reshape(n, co, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w2.T, g3).reshape(n, c, k, k, ho, wo)
        gxp = _scatter(gcols, k, stride, xp.shape)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_op("conv2d", out, parents, backward)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, out_pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`.  ``w`` has shape (c_in, c_out, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d_transpose expects 4-d input and weight")
    n, c, h, wd = x.shape
    ci, co, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeMismatch(f"conv2d_transpose: input has {c} channels, weight {w.shape}")
    if b is not None and b.shape != (co,):
        raise ShapeMismatch(f"conv2d_transpose: bias shape {b.shape}, expected ({co},)")
    ho = (h - 1) * stride - 2 * pad + k + out_pad
    wo = (wd - 1) * stride - 2 * pad + k + out_pad
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d_transpose: non-positive output size")
    full_h = max((h - 1) * stride + k, pad + ho)
    full_w = max((wd - 1) * stride + k, pad + wo)
    x3 = _f64(x).reshape(n, c, h * wd)
    w2 = _f64(w).reshape(ci, -1)
    cols = np.matmul(w2.T, x3).reshape(n, co, k, k, h, wd)
    full = _scatter(cols, k, stride, (n, co, full_h, full_w))
    out = np.ascontiguousarray(full[:, :, pad : pad + ho, pad : pad + wo])
    if b is not None:
        out += _f64(b).reshape(1, co, 1, 1)

    def backward(g):
        gfull = np.zeros((n, co, full_h, full_w))
        gfull[:, :, pad : pad + ho, pad : pad + wo] = g
        gcols = _patches(gfull, k, stride, h, wd)
        gx = np.matmul(w2, gcols).reshape(n, ci, h, wd)
        gw = np.matmul(x3, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_op("conv2d_transpose", out, parents, backward)


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls.  Intermediate gradients live only
    for the duration of the call.
    """
    if loss.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for idx in range(loss.node_id, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, parents, fn = tape.nodes[idx]
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                continue
            if parent.node_id is not None and parent.node_id < idx and tape.nodes[parent.node_id][0] is parent:
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
            else:
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


@contextlib.contextmanager
def strict_mode():
    """Pin BLAS to one thread so repeated runs are bit-identical."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield
