"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is desk scale: plain numpy storage, gradients accumulated by
summation, and per-output op records that a backward pass replays exactly
once in reverse topological order. Broadcasting is supported only where
the model needs it (leading batch axes, trailing bias vectors, scalars).

Tensors are immutable once created, except for gradient accumulation and
the optimizer mutating leaf parameter values between forward passes. A
forward+backward pair must stay on a single thread; read-only sharing of
leaves across threads is safe.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a kernel."""


_state = threading.local()
_debug_checks = False

# Tombstone left in place of an op record once backward has replayed it.
_CONSUMED = object()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables recording of op records."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def set_debug_checks(enabled: bool) -> None:
    """Toggle non-finite input detection on every kernel (slow; debugging aid)."""
    global _debug_checks
    _debug_checks = enabled


@dataclass
class OpRecord:
    """One logged primitive: its inputs and the rule pushing grads back to them.

    A backward pass visits each record exactly once, in reverse topological
    order of the forward graph, then clears it. ``push_grads`` maps the
    output gradient to one gradient per input (None for non-differentiable
    slots).
    """

    op: str
    inputs: tuple["Tensor", ...]
    push_grads: Callable[[np.ndarray], tuple]


class Tensor:
    """A dense float64 array plus a gradient slot and an op record."""

    __slots__ = ("values", "requires_grad", "grad", "_record")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arrays) -> None:
    if _debug_checks:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{op}: non-finite input values")


def _make(values: np.ndarray, op: str, inputs: tuple[Tensor, ...], push_grads) -> Tensor:
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    if requires:
        out._record = OpRecord(op, inputs, push_grads)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _reduce_leading(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # like _unbroadcast but never touches the trailing two (matrix) axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(max(0, grad.ndim - 2)) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive kernels
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", (a.values, b.values))
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def push(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(values, "add", (a, b), push)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("sub", (a.values, b.values))
    try:
        values = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def push(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(values, "sub", (a, b), push)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with limited broadcasting."""
    _check_finite("mul", (a.values, b.values))
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def push(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(values, "mul", (a, b), push)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must be rank >= 2 (leading axes broadcast)."""
    _check_finite("matmul", (a.values, b.values))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} must be rank >= 2")
    try:
        values = a.values @ b.values
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def push(g):
        ga = _reduce_leading(g @ np.swapaxes(b.values, -1, -2), a.shape)
        gb = _reduce_leading(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(values, "matmul", (a, b), push)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an axis; the inverse slicing is bit-exact."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    _check_finite("concat", [t.values for t in tensors])
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: shapes {shapes} do not align on axis {axis}") from None
    sizes = [t.values.shape[axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def push(g):
        return tuple(np.split(g, split_at, axis=axis))

    return _make(values, "concat", tensors, push)


def narrow(t: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice of ``size`` entries along ``axis`` starting at ``start``."""
    dim = t.shape[axis]
    if start < 0 or size < 1 or start + size > dim:
        raise ShapeError(f"narrow: slice [{start}:{start + size}) outside axis of size {dim}")
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    values = t.values[index]

    def push(g):
        full = np.zeros_like(t.values)
        full[index] = g
        return (full,)

    return _make(values, "narrow", (t,), push)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    values = t.values.reshape(shape)

    def push(g):
        return (g.reshape(t.shape),)

    return _make(values, "reshape", (t,), push)


def swap_last_axes(t: Tensor) -> Tensor:
    if t.ndim < 2:
        raise ShapeError(f"swap_last_axes: shape {t.shape} must be rank >= 2")
    values = np.swapaxes(t.values, -1, -2)

    def push(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(values, "swap_last_axes", (t,), push)


def relu(t: Tensor) -> Tensor:
    _check_finite("relu", (t.values,))
    values = np.maximum(t.values, 0.0)

    def push(g):
        return (g * (t.values > 0.0),)

    return _make(values, "relu", (t,), push)


def tanh(t: Tensor) -> Tensor:
    _check_finite("tanh", (t.values,))
    values = np.tanh(t.values)

    def push(g):
        return (g * (1.0 - values * values),)

    return _make(values, "tanh", (t,), push)


def sigmoid(t: Tensor) -> Tensor:
    _check_finite("sigmoid", (t.values,))
    x = t.values
    values = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def push(g):
        return (g * values * (1.0 - values),)

    return _make(values, "sigmoid", (t,), push)


def softmax(t: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over ``axis``, computed with max-subtraction for stability.

    Max-subtraction preserves the exact softmax semantics. ``mask`` marks
    valid positions; masked logits are sent to -inf before normalization so
    their weight is exactly zero. Every slice needs at least one valid
    position.
    """
    _check_finite("softmax", (t.values,))
    x = t.values
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    values = e / e.sum(axis=axis, keepdims=True)

    def push(g):
        inner = (g * values).sum(axis=axis, keepdims=True)
        return (values * (g - inner),)

    return _make(values, "softmax", (t,), push)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    """log(softmax(t)) in one stable step; never produces -inf for finite logits."""
    _check_finite("log_softmax", (t.values,))
    x = t.values
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    values = z - lse

    def push(g):
        return (g - np.exp(values) * g.sum(axis=axis, keepdims=True),)

    return _make(values, "log_softmax", (t,), push)


def sum_all(t: Tensor) -> Tensor:
    values = np.asarray(t.values.sum())

    def push(g):
        return (np.broadcast_to(g, t.shape).copy() if t.shape else np.asarray(g),)

    return _make(values, "sum", (t,), push)


def mean_all(t: Tensor) -> Tensor:
    n = t.values.size
    values = np.asarray(t.values.mean())

    def push(g):
        return (np.broadcast_to(g / n, t.shape).copy() if t.shape else np.asarray(g),)

    return _make(values, "mean", (t,), push)


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance."""
    _check_finite("layer_norm", (t.values,))
    x = t.values
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    values = xc * inv

    def push(g):
        gy = g - g.mean(axis=-1, keepdims=True)
        gy -= values * (g * values).mean(axis=-1, keepdims=True)
        return (gy * inv,)

    return _make(values, "layer_norm", (t,), push)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into ``table``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table shape {table.shape} must be rank 2")
    if ids.size == 0:
        raise ShapeError("embedding: empty id sequence")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup"
        )
    values = table.values[ids]
    width = table.shape[1]

    def push(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
        return (gt,)

    return _make(values, "embedding", (table,), push)


def dropout(t: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: train-mode mask scaled by 1/keep, identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return t
    if rng is None:
        raise ValueError("dropout: training mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(t.shape) >= rate) / keep
    return mul(t, Tensor(mask))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        rec = node._record
        if rec is _CONSUMED:
            raise RuntimeError(
                "backward: graph already consumed by a previous backward pass; "
                "run a new forward first"
            )
        if rec is not None:
            for t in rec.inputs:
                if id(t) not in visited and t._record is not None:
                    stack.append((t, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every reachable leaf's grad.

    The op records are replayed exactly once in reverse topological order
    and cleared afterwards; a second backward over the same graph raises.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss shape {loss.shape} is not scalar")
    if loss._record is _CONSUMED:
        raise RuntimeError("backward: already ran for this tensor; run a new forward first")
    if loss._record is None and not loss.requires_grad:
        raise RuntimeError("backward: loss is not connected to any tensor requiring gradients")

    order = _toposort(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        rec = node._record
        if rec is None or rec is _CONSUMED:
            continue
        if node.grad is None:
            node._record = _CONSUMED
            continue
        grads = rec.push_grads(node.grad)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.asarray(g, dtype=np.float64).reshape(t.shape).copy()
            else:
                t.grad = t.grad + np.asarray(g, dtype=np.float64).reshape(t.shape)
        node._record = _CONSUMED


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    tol: float
    step: float
    coordinates_checked: int
    worst: tuple[str, int, float, float] | None = None  # tensor, flat index, analytic, numeric

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, point, tol: float = 1e-4, step: float = 1e-5, rel_floor: float = 1e-6) -> GradCheckReport:
    """Check df/dpoint of a scalar-valued ``f`` against central differences.

    Relative error uses max(|analytic|, |numeric|, rel_floor) as denominator,
    so zero-gradient coordinates compare absolutely at the floor scale.
    """
    x = Tensor(np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64), requires_grad=True)
    out = f(x)
    if out.values.size != 1:
        raise ShapeError(f"grad_check: f returned shape {out.shape}, expected scalar")
    backward(out)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.values)).ravel()

    flat = x.values.ravel()
    numeric = np.zeros_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).values)
            flat[i] = orig - step
            fm = float(f(x).values)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)

    errs = _rel_errors(analytic, numeric, rel_floor)
    if errs.size == 0:
        return GradCheckReport(0.0, tol, step, 0)
    worst_i = int(np.argmax(errs))
    worst = ("point", worst_i, float(analytic[worst_i]), float(numeric[worst_i]))
    return GradCheckReport(float(errs[worst_i]), tol, step, int(errs.size), worst)


def grad_check_params(
    f,
    params: dict[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    rel_floor: float = 1e-6,
    coords_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check df/dθ for a zero-argument scalar ``f`` over a parameter dict.

    With ``coords_per_tensor`` set, a seeded subset of coordinates per tensor
    is compared; otherwise every coordinate is. The analytic side comes from
    one backward pass, the numeric side from in-place central differences.
    """
    for t in params.values():
        t.zero_grad()
    out = f()
    if out.values.size != 1:
        raise ShapeError(f"grad_check_params: f returned shape {out.shape}, expected scalar")
    backward(out)

    rng = np.random.default_rng(seed)
    worst = None
    max_err = 0.0
    checked = 0
    with no_grad():
        for name in sorted(params):
            t = params[name]
            analytic = (t.grad if t.grad is not None else np.zeros_like(t.values)).ravel()
            flat = t.values.ravel()
            n = flat.size
            if coords_per_tensor is not None and coords_per_tensor < n:
                coords = rng.choice(n, size=coords_per_tensor, replace=False)
            else:
                coords = np.arange(n)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().values)
                flat[i] = orig - step
                fm = float(f().values)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                err = float(_rel_errors(np.asarray(analytic[i]), np.asarray(numeric), rel_floor))
                checked += 1
                if err > max_err:
                    max_err = err
                    worst = (name, int(i), float(analytic[i]), numeric)
    return GradCheckReport(max_err, tol, step, checked, worst)
