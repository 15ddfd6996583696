"""Dense multi-mode tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array of up to three explicit modes. While a
:class:`Tape` is active, every operation appends a backward closure to it;
``Tape.backward`` replays the records in reverse execution order (a valid
reverse-topological order) and accumulates gradients on leaves created with
``requires_grad=True``.

Values are immutable once produced by an operation. Optimizers may swap the
``data`` reference of a *leaf* between forward passes; closures captured on a
tape hold the arrays they saw, so an in-flight tape stays consistent.

Finite checking: by default every operation validates that its result is
finite and raises :class:`InvalidValueError` naming the op otherwise. The
training loop disables the per-op check on its hot path and re-runs a failing
episode with checks enabled to produce the diagnostic (see ``finite_checks``).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
import scipy.linalg

from .errors import (
    InvalidShapeError,
    InvalidValueError,
    NumericalFailureError,
    TapeUsageError,
)

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _checks_enabled() -> bool:
    return getattr(_LOCAL, "finite_checks", True)


def set_finite_checks(enabled: bool) -> None:
    """Globally enable/disable the per-op finite-result validation."""
    _LOCAL.finite_checks = bool(enabled)


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle per-op finite-result validation."""
    old = _checks_enabled()
    _LOCAL.finite_checks = bool(enabled)
    try:
        yield
    finally:
        _LOCAL.finite_checks = old


class Tape:
    """Ordered record of executed ops for one forward pass.

    Single-threaded: record and backward must happen on the same logical
    thread. A tape is consumed by ``backward`` and cannot be replayed.
    """

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every trainable
        leaf reachable from ``loss``. Leaves not on the path keep ``grad``
        ``None``, which readers treat as zero."""
        if self._consumed:
            raise TapeUsageError("tape already consumed by a previous backward pass")
        if loss.size != 1:
            raise InvalidShapeError(f"loss must be scalar-shaped, got shape {loss.shape}")
        if not loss._tracked:
            raise TapeUsageError("loss is not connected to this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, pairs in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            for tensor, grad_fn in pairs:
                tensor._accumulate(grad_fn(g))
        self._records = []


class Tensor:
    """Immutable dense value participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if _checks_enabled() and not np.all(np.isfinite(arr)):
            raise InvalidValueError("tensor: non-finite values in data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tracked = self.requires_grad

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same value, cut from the differentiation graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._tracked = False
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def _accumulate(self, g: np.ndarray) -> None:
        # gradients are never mutated in place anywhere (only rebound), so
        # adopting the incoming array, even a view, is safe and copy-free
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- operator sugar ------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap a value as a constant Tensor, matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _finalize(name: str, value: np.ndarray, inputs, grad_fns) -> Tensor:
    """Build the output tensor, validate it, and record the backward pairs.

    ``grad_fns`` aligns with ``inputs``: each is ``fn(g) -> ndarray`` or None
    for inputs that never receive gradient.
    """
    if _checks_enabled() and not np.all(np.isfinite(value)):
        raise InvalidValueError(f"{name}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.requires_grad = False
    out._tracked = False
    tape = _active_tape()
    if tape is not None:
        pairs = [
            (t, fn)
            for t, fn in zip(inputs, grad_fns)
            if t._tracked and fn is not None
        ]
        if pairs:
            out._tracked = True
            tape._records.append((out, pairs))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and reduction ops --------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return _finalize(
        "add",
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return _finalize(
        "sub",
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return _finalize(
        "mul",
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    value = a.data / b.data
    return _finalize(
        "div",
        value,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * value / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finalize("neg", -a.data, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _finalize("exp", value, (a,), (lambda g: g * value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _finalize("log", np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.data)
    return _finalize("sqrt", value, (a,), (lambda g: g / (2.0 * value),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _finalize(
        "relu", np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,)
    )


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _finalize(
        "clamp_min",
        np.maximum(a.data, np.asarray(floor, dtype=a.dtype)),
        (a,),
        (lambda g: g * mask,),
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.shape)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape)

    return _finalize("sum", value, (a,), (grad,))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.shape) / count
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape) / count

    return _finalize("mean", value, (a,), (grad,))


# -- shape ops -----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _finalize(
        "reshape", a.data.reshape(shape), (a,), (lambda g: g.reshape(a.shape),)
    )


def index(a, key) -> Tensor:
    """Basic slicing. Backward scatters the gradient back into zeros."""
    a = as_tensor(a)
    value = a.data[key]

    def grad(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[key] = g
        return full

    return _finalize("index", value, (a,), (grad,))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_grad(i):
        lo, hi = offsets[i], offsets[i + 1]

        def grad(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return grad

    return _finalize(
        "concat", value, tuple(tensors), tuple(make_grad(i) for i in range(len(tensors)))
    )


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise InvalidShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    return _finalize("transpose2d", a.data.T, (a,), (lambda g: g.T,))


def transpose12(a) -> Tensor:
    """Swap the first and second modes of a three-mode tensor."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise InvalidShapeError(f"transpose12 expects three modes, got shape {a.shape}")
    # materialized contiguously: several downstream contractions reuse it
    return _finalize(
        "transpose12",
        np.ascontiguousarray(np.transpose(a.data, (1, 0, 2))),
        (a,),
        (lambda g: np.transpose(g, (1, 0, 2)),),
    )


# -- linear-algebra ops ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidShapeError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(
            f"matmul: inner sizes differ, {a.shape} vs {b.shape}"
        )
    return _finalize(
        "matmul",
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def mode3_product(z, w) -> Tensor:
    """Contract the third mode of ``z`` with ``w``:
    out[d1, d2, h] = sum_d3 z[d1, d2, d3] * w[h, d3]."""
    z = as_tensor(z)
    w = as_tensor(w, like=z)
    if z.ndim != 3 or w.ndim != 2:
        raise InvalidShapeError(
            f"mode3_product expects (3-mode, matrix), got shapes {z.shape} and {w.shape}"
        )
    if w.shape[1] != z.shape[2]:
        raise InvalidShapeError(
            f"mode3_product: third mode {z.shape} does not match weight {w.shape}"
        )
    d1, d2, d3 = z.shape
    h = w.shape[0]
    z2 = np.ascontiguousarray(z.data).reshape(d1 * d2, d3)
    value = (z2 @ w.data.T).reshape(d1, d2, h)

    def grad_z(g):
        return (g.reshape(d1 * d2, h) @ w.data).reshape(d1, d2, d3)

    def grad_w(g):
        return g.reshape(d1 * d2, h).T @ z2

    return _finalize("mode3_product", value, (z, w), (grad_z, grad_w))


def mode1_product(v, a) -> Tensor:
    """Aggregate the first-mode slices of ``v`` with the square matrix ``a``:
    out[d1, d2, h] = sum_d1' a[d1, d1'] * v[d1', d2, h]."""
    v = as_tensor(v)
    a = as_tensor(a, like=v)
    if v.ndim != 3 or a.ndim != 2:
        raise InvalidShapeError(
            f"mode1_product expects (3-mode, matrix), got shapes {v.shape} and {a.shape}"
        )
    if a.shape[0] != a.shape[1] or a.shape[1] != v.shape[0]:
        raise InvalidShapeError(
            f"mode1_product: weights {a.shape} do not match first mode of {v.shape}"
        )
    d1, d2, h = v.shape
    v2 = np.ascontiguousarray(v.data).reshape(d1, d2 * h)
    value = (a.data @ v2).reshape(d1, d2, h)

    def grad_v(g):
        return (a.data.T @ g.reshape(d1, d2 * h)).reshape(d1, d2, h)

    def grad_a(g):
        return g.reshape(d1, d2 * h) @ v2.T

    return _finalize("mode1_product", value, (v, a), (grad_v, grad_a))


def matricize_mode1(q) -> Tensor:
    """Flatten each first-mode slice into a row: (D1, D2, H) -> (D1, D2*H)."""
    q = as_tensor(q)
    if q.ndim != 3:
        raise InvalidShapeError(
            f"matricize_mode1 expects three modes, got shape {q.shape}"
        )
    d1 = q.shape[0]
    return reshape(q, (d1, q.shape[1] * q.shape[2]))


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a square matrix, computed with max subtraction."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise InvalidShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise InvalidValueError("softmax_rows: non-finite input")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        inner = (g * value).sum(axis=1, keepdims=True)
        return value * (g - inner)

    return _finalize("softmax_rows", value, (m,), (grad,))


def layer_norm(z, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each fiber along the last axis to zero mean / unit variance
    (epsilon-regularized), then apply the affine ``gain * normed + bias``."""
    z = as_tensor(z)
    gain = as_tensor(gain, like=z)
    bias = as_tensor(bias, like=z)
    h = z.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise InvalidShapeError(
            f"layer_norm: gain/bias must have shape ({h},), got {gain.shape} and {bias.shape}"
        )
    mean = z.data.mean(axis=-1, keepdims=True)
    centered = z.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=z.dtype))
    normed = centered * inv_std
    value = normed * gain.data + bias.data
    axes = tuple(range(z.ndim - 1))

    def grad_z(g):
        gy = g * gain.data
        term = gy - gy.mean(axis=-1, keepdims=True) \
            - normed * np.mean(gy * normed, axis=-1, keepdims=True)
        return term * inv_std

    def grad_gain(g):
        return (g * normed).sum(axis=axes)

    def grad_bias(g):
        return g.sum(axis=axes)

    return _finalize("layer_norm", value, (z, gain, bias),
                     (grad_z, grad_gain, grad_bias))


def solve_spd(a, b) -> Tensor:
    """Solve ``sym(a) @ x = b`` through a Cholesky factorization.

    ``a`` is read as the symmetric matrix (a + a^T)/2; gradients are the
    gradients of that symmetrized map. Never forms an explicit inverse.
    Raises :class:`NumericalFailureError` when the factorization fails.
    """
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidShapeError(f"solve_spd expects a square matrix, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise InvalidShapeError(
            f"solve_spd: right-hand side {b.shape} does not match matrix {a.shape}"
        )
    sym = 0.5 * (a.data + a.data.T)
    try:
        factor = scipy.linalg.cho_factor(sym, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        raise NumericalFailureError(f"solve_spd: factorization failed: {err}") from err
    x = scipy.linalg.cho_solve(factor, b.data, check_finite=False)

    def grad_a(g):
        gb = scipy.linalg.cho_solve(factor, g, check_finite=False)
        full = -gb @ x.T
        return 0.5 * (full + full.T)

    def grad_b(g):
        return scipy.linalg.cho_solve(factor, g, check_finite=False)

    return _finalize("solve_spd", x, (a, b), (grad_a, grad_b))


# -- verification helpers ----------------------------------------------------


def numeric_gradient(fn, arrays, step: float = 1e-5):
    """Central finite differences of ``fn(arrays) -> float`` w.r.t. each array.

    Arrays should be float64 for the stated tolerances to be meaningful.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def check_gradients(build_loss, leaves, step: float = 1e-5, rtol: float = 1e-4,
                    atol: float = 1e-7) -> float:
    """Compare reverse-mode gradients of ``build_loss()`` against central
    finite differences for every leaf: elementwise relative error below
    ``rtol`` with an absolute floor of ``atol`` near zero.

    Raises AssertionError past tolerance. Returns the worst error normalized
    by the tolerance (<= 1 means within tolerance)."""

    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in leaves]
    for p in leaves:
        p.grad = None

    def run():
        with finite_checks(False):
            return float(build_loss().data)

    numeric = numeric_gradient(run, [p.data for p in leaves], step=step)
    worst = 0.0
    for got, want in zip(analytic, numeric):
        np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)
        ratio = np.abs(got - want) / (atol + rtol * np.abs(want))
        worst = max(worst, float(np.max(ratio, initial=0.0)))
    return worst
