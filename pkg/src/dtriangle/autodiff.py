"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on a :class:`Tensor` that requires gradient records a node
holding its parents and a closure that maps the upstream gradient to the
parents' partials. :meth:`Tensor.backward` orders the recorded nodes
topologically and visits each exactly once in reverse.

Broadcasting is limited to scalar-with-tensor and equal shapes. Bias terms
use the dedicated :func:`bias_add`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.exceptions import AxisError
from numpy.lib.array_utils import normalize_axis_tuple
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "no_grad",
    "is_grad_enabled",
    "kink_monitor",
    "as_tensor",
    "elementwise",
    "matmul",
    "bias_add",
    "conv2d",
    "conv_transpose2d",
    "conv_output_size",
    "conv_transpose_output_size",
    "reduce",
    "reshape",
    "slice_axis",
    "check_gradients",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An operand lies outside the domain of the operation (e.g. log of 0)."""


_GRAD_ENABLED = True
_KINK_LOG: list[float] | None = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def kink_monitor():
    """Collect the smallest |input| seen by every relu/leaky_relu evaluated."""
    global _KINK_LOG
    prev = _KINK_LOG
    log: list[float] = []
    _KINK_LOG = log
    try:
        yield log
    finally:
        _KINK_LOG = prev


class Tensor:
    """An n-dimensional float64 array that can take part in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- bookkeeping -----------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            partials = node._backward(g)
            for parent, pg in zip(node._parents, partials):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def square(self):
        return elementwise("square", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def relu(self):
        return elementwise("relu", self)

    def leaky_relu(self, slope: float = 0.2):
        return elementwise("leaky_relu", self, slope=slope)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_UNARY = {"neg", "square", "exp", "log", "tanh", "relu", "leaky_relu"}
_BINARY = {"add", "sub", "mul", "div"}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand
    return np.asarray(g.sum()).reshape(shape)


def elementwise(kind: str, a, b=None, *, slope: float = 0.2) -> Tensor:
    """Apply an elementwise op. Binary ops accept a scalar or an equal-shape operand."""
    a = as_tensor(a)
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} is unary")
        return _unary(kind, a, slope)
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if b is None:
        raise TypeError(f"{kind} needs two operands")
    b = as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    ad, bd = a.data, b.data
    if a.shape == b.shape or b.size == 1 and (a.size != 1 or a.ndim >= b.ndim):
        out_shape = a.shape
    else:
        out_shape = b.shape
    if kind == "add":
        out = ad + bd
        bw = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif kind == "sub":
        out = ad - bd
        bw = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif kind == "mul":
        out = ad * bd
        bw = lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
    else:
        if np.any(bd == 0):
            raise DomainError("div: division by zero")
        out = ad / bd
        bw = lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape))
    out = np.asarray(out).reshape(out_shape)
    return _record(out, (a, b), bw, kind)


def _unary(kind: str, a: Tensor, slope: float) -> Tensor:
    x = a.data
    if kind == "neg":
        return _record(-x, (a,), lambda g: (-g,), kind)
    if kind == "square":
        return _record(x * x, (a,), lambda g: (2.0 * x * g,), kind)
    if kind == "exp":
        y = np.exp(x)
        return _record(y, (a,), lambda g: (g * y,), kind)
    if kind == "log":
        if np.any(x <= 0):
            raise DomainError("log of a non-positive value")
        return _record(np.log(x), (a,), lambda g: (g / x,), kind)
    if kind == "tanh":
        y = np.tanh(x)
        return _record(y, (a,), lambda g: (g * (1.0 - y * y),), kind)
    if _KINK_LOG is not None and x.size:
        _KINK_LOG.append(float(np.min(np.abs(x))))
    pos = x > 0  # derivative at exactly 0 is taken from the left branch
    if kind == "relu":
        return _record(np.where(pos, x, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), kind)
    return _record(
        np.where(pos, x, slope * x), (a,), lambda g: (np.where(pos, g, slope * g),), kind
    )


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bias_add(x, bias, axis: int = 1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (features for dense, channels for conv)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.ndim <= axis or x.shape[axis] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = bias.shape[0]
    other = tuple(i for i in range(x.ndim) if i != axis)
    return _record(
        x.data + bias.data.reshape(view),
        (x, bias),
        lambda g: (g, g.sum(axis=other)),
        "bias_add",
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """``a[..., start:stop, ...]`` along one axis."""
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] outside axis {axis} of extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _record(a.data[idx].copy(), (a,), bw, "slice")


def reduce(kind: str, a, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (``None`` = all axes, ``()`` = identity)."""
    a = as_tensor(a)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    try:
        axes = normalize_axis_tuple(axes, a.ndim)
    except AxisError as exc:
        raise ShapeError(str(exc)) from None
    if not axes:
        return _record(a.data.copy(), (a,), lambda g: (g,), kind)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.sum(axis=axes) if kind == "sum" else a.data.mean(axis=axes)
    keep = [1 if i in axes else s for i, s in enumerate(a.shape)]
    scale = 1.0 if kind == "sum" else 1.0 / max(count, 1)

    def bw(g):
        return (np.broadcast_to(g.reshape(keep) * scale, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw, kind)


# ---------------------------------------------------------------------------
# convolution (cross-correlation convention)
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if stride < 1 or pad < 0 or span < 0 or span % stride:
        raise ShapeError(
            f"conv geometry n={n}, k={k}, stride={stride}, pad={pad} gives a non-integral output"
        )
    return span // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, pad: int) -> int:
    out = (n - 1) * stride - 2 * pad + k
    if stride < 1 or pad < 0 or out < 1:
        raise ShapeError(f"conv_transpose geometry n={n}, k={k}, stride={stride}, pad={pad} invalid")
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    b, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, ho, wo, c, k, k)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def _conv_fwd(x, w, stride, pad):
    b, _, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    cols = _im2col(x, k, stride, pad, ho, wo)
    out = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2)), cols


def _conv_input_grad(g, w, stride, pad, in_shape):
    b, f, ho, wo = g.shape
    _, c, k, _ = w.shape
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
    return _col2im(gmat @ w.reshape(f, -1), in_shape, k, stride, pad, ho, wo)


def _conv_weight_grad(cols, g, w_shape):
    f = w_shape[0]
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
    return (gmat.T @ cols).reshape(w_shape)


def _check_conv_operands(x: Tensor, w: Tensor, name: str) -> None:
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{name}: expected x[B,C,H,W] and square w[F,C,k,k], got {x.shape}, {w.shape}")


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided 2-D cross-correlation; ``w`` is ``[F, C, k, k]``."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_operands(x, w, "conv2d")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    out, cols = _conv_fwd(x.data, w.data, stride, pad)
    wd = w.data

    def bw(g):
        gx = _conv_input_grad(g, wd, stride, pad, x.shape) if x.requires_grad else None
        gw = _conv_weight_grad(cols, g, wd.shape) if w.requires_grad else None
        return gx, gw

    return _record(out, (x, w), bw, "conv2d")


def conv_transpose2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``w[F, C, k, k]``: maps F channels to C."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_operands(x, w, "conv_transpose2d")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    b, _, h, wdt = x.shape
    k = w.shape[2]
    out_shape = (
        b,
        w.shape[1],
        conv_transpose_output_size(h, k, stride, pad),
        conv_transpose_output_size(wdt, k, stride, pad),
    )
    out = _conv_input_grad(x.data, w.data, stride, pad, out_shape)
    xd, wd = x.data, w.data

    def bw(g):
        gx, cols = _conv_fwd(g, wd, stride, pad)
        gw = _conv_weight_grad(cols, xd, wd.shape) if w.requires_grad else None
        return (gx if x.requires_grad else None), gw

    return _record(out, (x, w), bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    near_kink: bool
    analytic: list[np.ndarray] = field(repr=False)
    numeric: list[np.ndarray] = field(repr=False)

    def __bool__(self) -> bool:
        return self.passed


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Sequence,
    step: float = 1e-5,
    tol: float = 1e-5,
    *,
    floor: float = 1e-8,
    kink_tol: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` to central finite differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``near_kink`` is set when any relu/leaky_relu input came within
    ``max(kink_tol, step)``-scaled distance of 0 during evaluation; such a
    report never passes because finite differences straddle the kink.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]

    def evaluate(arrs, grad: bool):
        ts = [Tensor(a, requires_grad=grad) for a in arrs]
        out = f(*ts)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ShapeError("check_gradients needs a scalar-valued function")
        return ts, out

    with kink_monitor() as kinks:
        ts, out = evaluate(arrays, True)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    near_kink = bool(kinks) and min(kinks) < kink_tol

    numeric = []
    with no_grad():
        for a in arrays:
            num = np.zeros_like(a)
            flat = a.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = evaluate(arrays, False)[1].item()
                flat[i] = orig - step
                fm = evaluate(arrays, False)[1].item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * step)
            numeric.append(num)

    err = 0.0
    for an, nu in zip(analytic, numeric):
        if an.size:
            denom = np.maximum(np.maximum(np.abs(an), np.abs(nu)), floor)
            err = max(err, float(np.max(np.abs(an - nu) / denom)))
    return GradCheckReport(err, tol, (err <= tol) and not near_kink, near_kink, analytic, numeric)
