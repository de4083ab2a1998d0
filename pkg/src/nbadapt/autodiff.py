"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

A single global Wengert tape records every differentiable operation; backward()
replays the tape in reverse, accumulating gradients additively into parameter
buffers. Two precisions are supported: float32 for experiments, float64 for
gradient checks (finite differences are unreliable at 32-bit).

Broadcasting rule for elementwise primitives: shapes are aligned at the
rightmost axis, missing leading axes are treated as size 1, and an axis may
broadcast only if its extent is exactly 1. Anything else raises ShapeError.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class AutodiffError(Exception):
    """Misuse of the tape or an op (non-scalar backward, empty tape, ...)."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform to the primitive's rule."""


# --------------------------------------------------------------------------
# precision mode
# --------------------------------------------------------------------------

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the global precision for newly created tensors ('float32'/'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise AutodiffError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the global precision mode."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


# --------------------------------------------------------------------------
# tensors and the tape
# --------------------------------------------------------------------------


class Tensor:
    """Dense array participating in the gradient tape.

    `grad` is lazily allocated on the first backward pass and accumulates (+=)
    across backward calls until `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = _wrap(self.data.copy())
        t.requires_grad = self.requires_grad
        t._tracked = self.requires_grad
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars become constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.data.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.data.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(arr: np.ndarray) -> Tensor:
    """Internal op-output constructor: wraps without casting or copying."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._tracked = False
    return t


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=dtype))


@dataclass
class _OpRecord:
    out: Tensor
    inputs: tuple
    backward: object  # callable(out_grad) -> sequence of grads aligned with inputs
    name: str


_TAPE: list = []
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording (decoding, evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def tape_length() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


def record(name: str, out: Tensor, inputs, backward_fn) -> Tensor:
    """Record an op on the tape when grad mode is on and any input is tracked.

    `backward_fn(out_grad)` must return one gradient array (or None) per input,
    freshly computed and never mutated afterwards.
    """
    if _GRAD_ENABLED and any(isinstance(t, Tensor) and t._tracked for t in inputs):
        out._tracked = True
        _TAPE.append(_OpRecord(out, tuple(inputs), backward_fn, name))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable requires_grad tensor.

    The tape is consumed: it is cleared once the reverse sweep completes, so a
    second backward needs a fresh forward pass. Gradients from successive
    backward calls add up until zero_grad.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _TAPE:
        raise AutodiffError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for rec in reversed(_TAPE):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor):
                    continue
                if inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = ig.copy()
                    else:
                        inp.grad += ig
                elif inp._tracked:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
    finally:
        _TAPE.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# broadcasting helpers
# --------------------------------------------------------------------------


def _check_broadcast(op_name: str, sa: tuple, sb: tuple) -> None:
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op_name}: shapes {sa} and {sb} do not broadcast "
                             f"(rightmost-aligned, size-1 expansion only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a.shape, b.shape)
    out = _wrap(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a.shape, b.shape)
    out = _wrap(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a.shape, b.shape)
    out = _wrap(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = _wrap(-a.data)
    return record("neg", out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product for 1-D/2-D operands (numpy matmul semantics)."""
    ad = a.data.T if transpose_a else a.data
    bd = b.data.T if transpose_b else b.data
    if ad.ndim > 2 or bd.ndim > 2 or ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: only 1-D/2-D operands supported, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
                         + (" (transposed)" if transpose_a or transpose_b else ""))
    out = _wrap(ad @ bd)

    def bwd(g):
        a2 = ad if ad.ndim == 2 else ad[None, :]
        b2 = bd if bd.ndim == 2 else bd[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        da = (g2 @ b2.T).reshape(ad.shape)
        db = (a2.T @ g2).reshape(bd.shape)
        if transpose_a:
            da = da.T.copy()
        if transpose_b:
            db = db.T.copy()
        return da, db

    return record("matmul", out, (a, b), bwd)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = _wrap(y)
    return record("sigmoid", out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _wrap(y)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    out = _wrap(y)
    return record("relu", out, (a,), lambda g: (g * (a.data > 0),))


def log(a: Tensor) -> Tensor:
    out = _wrap(np.log(a.data))
    return record("log", out, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _wrap(y)
    return record("exp", out, (a,), lambda g: (g * y,))


def softmax(a: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of a/temperature along `axis`."""
    if temperature <= 0:
        raise AutodiffError(f"softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y / temperature,)

    return record("softmax", out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = _wrap(y)

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return outs

    return record("concat", out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _wrap(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        return list(np.moveaxis(g, axis, 0))

    return record("stack", out, tuple(tensors), bwd)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows/elements along `axis` (embedding lookup, row slicing)."""
    idx = np.asarray(indices)
    out = _wrap(np.take(a.data, idx, axis=axis))

    def bwd(g):
        da = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(da, idx, g)
        else:
            np.add.at(np.moveaxis(da, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (da,)

    return record("take", out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = _wrap(a.data.reshape(shape))
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _wrap(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record("sum", out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = _wrap(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return record("mean", out, (a,), bwd)


def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Mean per-token cross-entropy with uniform label smoothing.

    The target distribution for row i is (1-smoothing)*onehot(targets[i]) +
    smoothing/V. Returns a scalar: the mean over rows.
    """
    if not 0.0 <= smoothing < 1.0:
        raise AutodiffError(f"cross_entropy: smoothing must be in [0, 1), got {smoothing}")
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    m, v = logits.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = -(1.0 - smoothing) * logp[rows, t].sum()
    if smoothing > 0.0:
        loss -= (smoothing / v) * logp.sum()
    out = _wrap(np.asarray(loss / m, dtype=logits.data.dtype))

    def bwd(g):
        soft = np.exp(logp)
        dl = soft * (1.0 / m)
        dl[rows, t] -= (1.0 - smoothing) / m
        if smoothing > 0.0:
            dl -= smoothing / (v * m)
        return (dl * g,)

    return record("cross_entropy", out, (logits,), bwd)


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckGroup:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    groups: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def __str__(self):
        lines = [f"grad check (tol {self.tolerance:g}):"]
        for g in self.groups:
            status = "ok" if g.passed else "FAIL"
            lines.append(f"  {g.name:<28s} max rel err {g.max_rel_error:.3e}  {status}")
        return "\n".join(lines)


def grad_check(f, named_params: dict, h: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central differences.

    `f` recomputes the loss from the current parameter values; `named_params`
    maps group names to Tensors. Must run in float64 mode — differences at
    float32 are dominated by rounding noise.
    """
    if _DEFAULT_DTYPE is not np.float64:
        raise AutodiffError("grad_check requires float64 precision mode")
    for t in named_params.values():
        t.grad = None
    clear_tape()
    loss = f()
    backward(loss)
    report = GradCheckReport(tolerance=tol)
    for name, t in named_params.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                dn = float(f().data)
                flat[i] = orig
                nflat[i] = (up - dn) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = float((np.abs(analytic - numeric) / denom).max()) if flat.size else 0.0
        report.groups.append(GradCheckGroup(name=name, max_rel_error=rel, passed=rel < tol))
    return report


def global_norm(arrays) -> float:
    """L2 norm over a collection of arrays (gradient clipping, delta norms)."""
    total = 0.0
    for a in arrays:
        total += float(np.square(a, dtype=np.float64).sum())
    return math.sqrt(total)
