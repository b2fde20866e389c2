"""Minimal reverse-mode automatic differentiation over numpy arrays.

Values are float64 numpy arrays. A :class:`Variable` records the op that
produced it; :func:`backward` walks the graph in reverse topological order.
Broadcasting is limited to scalar-with-tensor and equal shapes.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-8

_kink_log: list | None = None


@contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the branch pattern of every non-smooth op evaluated inside the block.

    Two evaluations with equal patterns lie on the same smooth piece.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _branch(mask: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.asarray(mask))


class DimensionError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class EvaluationError(ArithmeticError):
    pass


class Variable:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Variable, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Variable(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _make(value, parents: Sequence[Variable], backward, op: str) -> Variable:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"{op} produced non-finite values")
    rg = any(p.requires_grad for p in parents)
    return Variable(value, rg, tuple(parents) if rg else (), backward if rg else None, op)


def _check_binary(a: Variable, b: Variable, op: str) -> None:
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand receives the summed gradient
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.value, a.shape), _reduce_to(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Variable:
    """a / b with the denominator magnitude clamped to at least EPS."""
    a, b = as_variable(a), as_variable(b)
    _check_binary(a, b, "div")
    den = np.where(b.value >= 0, np.maximum(b.value, EPS), np.minimum(b.value, -EPS))
    clamped = np.abs(b.value) < EPS
    _branch(np.sign(b.value) * ~clamped)

    def bw(g):
        ga = g / den
        gb = np.where(clamped, 0.0, -g * a.value / (den * den))
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _make(a.value / den, (a, b), bw, "div")


def relu(x) -> Variable:
    x = as_variable(x)
    pos = x.value > 0
    _branch(pos)
    return _make(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,), "relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Variable:
    x = as_variable(x)
    s = _stable_sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def abs_(x) -> Variable:
    x = as_variable(x)
    _branch(np.sign(x.value))
    return _make(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def log(x) -> Variable:
    """Natural log of max(x, EPS); zero gradient where clamped."""
    x = as_variable(x)
    c = np.maximum(x.value, EPS)
    live = x.value >= EPS
    _branch(live)
    return _make(np.log(c), (x,), lambda g: (np.where(live, g / c, 0.0),), "log")


def square(x) -> Variable:
    x = as_variable(x)
    return _make(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def sqrt(x) -> Variable:
    """Square root of max(x, EPS)."""
    x = as_variable(x)
    c = np.maximum(x.value, EPS)
    r = np.sqrt(c)
    live = x.value >= EPS
    _branch(live)
    return _make(r, (x,), lambda g: (np.where(live, g / (2.0 * r), 0.0),), "sqrt")


def clamp_min(x, lo: float) -> Variable:
    x = as_variable(x)
    live = x.value >= lo
    _branch(live)
    return _make(np.maximum(x.value, lo), (x,), lambda g: (g * live,), "clamp_min")


def stop_gradient(x) -> Variable:
    x = as_variable(x)
    return Variable(x.value.copy(), False, op="stop_gradient")


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} invalid for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(x, axes=None) -> Variable:
    x = as_variable(x)
    ax = _norm_axes(axes, x.value.ndim)
    out = x.value.sum(axis=ax)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axes=None) -> Variable:
    x = as_variable(x)
    ax = _norm_axes(axes, x.value.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    out = x.value.sum(axis=ax) / n

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _make(out, (x,), bw, "mean")


def reshape(x, shape) -> Variable:
    x = as_variable(x)
    try:
        out = x.value.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Variable:
    """Basic (slice/int) indexing."""
    x = as_variable(x)
    out = x.value[index]

    def bw(g):
        full = np.zeros_like(x.value)
        full[index] = g
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def take(x, flat_index: np.ndarray) -> Variable:
    """Gather ``x.ravel()[flat_index]``; repeated indices accumulate in backward."""
    x = as_variable(x)
    idx = np.asarray(flat_index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise DimensionError("take: index out of range")

    def bw(g):
        flat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=x.size)
        return (flat.reshape(x.shape),)

    return _make(x.value.ravel()[idx], (x,), bw, "take")


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Variable:
    """Cross-correlation of x[C_in,H,W] with kernel[C_out,C_in,kh,kw]."""
    x, kernel = as_variable(x), as_variable(kernel)
    if x.value.ndim != 3 or kernel.value.ndim != 4:
        raise DimensionError(f"conv2d expects 3-d input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding))) if padding else x.value
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, ho * wo)
    kmat = kernel.value.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, ho, wo)
    parents = [x, kernel]
    if bias is not None:
        bias = as_variable(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.value[:, None, None]
        parents.append(bias)

    def bw(g):
        gm = g.reshape(c_out, ho * wo)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gcols = (kmat.T @ gm).reshape(c_in, kh, kw, ho, wo)
        gxp = np.zeros((c_in, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix for align_corners=False linear sampling."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Variable:
    x = as_variable(x)
    if x.value.ndim != 3:
        raise DimensionError(f"bilinear_resize expects [C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize: output size must be >= 1")
    _, h, w = x.shape
    ry, rx = resize_matrix(h, out_h), resize_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, x.value), rx.T)

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make(out, (x,), bw, "bilinear_resize")


def _topo_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Variable) -> None:
    """Populate ``.grad`` on every requires_grad Variable reachable from a scalar root."""
    if root.value.size != 1:
        raise UsageError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tolerance: float = 1e-4
    abs_floor: float = 1e-8
    n_checked: int = 0
    # worst relative error over coordinates that do not rely on the absolute floor
    max_rel_above_floor: float = 0.0
    n_floor: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.op_name:<24} rel={self.max_rel_above_floor:.2e} "
                f"abs={self.max_abs_error:.2e} n={self.n_checked} below_floor={self.n_floor} "
                f"(rel incl. floor {self.max_rel_error:.2e})")


def grad_check(
    f: Callable[[Variable], Variable],
    x,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-8,
    op_name: str = "f",
    coords: np.ndarray | None = None,
    analytic: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    ``coords`` optionally restricts the check to a subset of flat coordinates.
    ``analytic`` overrides the autodiff gradient (used for negative controls).
    """
    x0 = np.array(x, dtype=np.float64)
    v = Variable(x0.copy(), requires_grad=True)
    out = f(v)
    if not np.isfinite(out.value).all():
        raise EvaluationError(f"{op_name}: non-finite value at x")
    if analytic is None:
        backward(out)
        analytic = v.grad if v.grad is not None else np.zeros_like(x0)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    idx = np.arange(x0.size) if coords is None else np.asarray(coords)
    max_rel = max_abs = max_rel_above = 0.0
    n_floor = 0
    passed = True
    flat = x0.ravel()
    for i in idx:
        xp = flat.copy()
        xp[i] += eps
        fp = f(Variable(xp.reshape(x0.shape))).item()
        xp[i] -= 2 * eps
        fm = f(Variable(xp.reshape(x0.shape))).item()
        num = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - num)
        scale = max(abs(a), abs(num))
        max_abs = max(max_abs, err)
        rel = err / max(scale, 1e-8)
        max_rel = max(max_rel, rel)
        if rel > tolerance and err <= abs_floor:
            n_floor += 1
        else:
            max_rel_above = max(max_rel_above, rel)
        # each coordinate must meet the relative tolerance or sit below the absolute floor
        passed = passed and (err <= tolerance * scale or err <= abs_floor)
    return GradCheckReport(op_name, max_rel, max_abs, passed, tolerance, abs_floor, len(idx), max_rel_above, n_floor)
