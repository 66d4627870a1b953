"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every tracked op output in creation order, which is already a
topological order, so backward() is a single reverse sweep that runs each
hand-written backward rule once and accumulates gradients into the leaves.
There is no symbolic or graph-level differentiation; every rule below was
derived by hand and is checked against central differences in the tests.

All data is float64. Broadcasting is limited to scalars (plus the dedicated
add_rowvec op for bias rows); anything else is a shape error.
"""

from __future__ import annotations

import numbers
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumcoreError(Exception):
    """Violation of a numeric-core contract."""


class ShapeError(NumcoreError):
    """Operand shapes do not conform to the op signature."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_f64(value) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    arr = np.asarray(value, dtype=np.float64, order="C")
    if arr.ndim > 3:
        raise ShapeError(f"arrays are limited to 3 axes, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    grad is populated by Tape.backward for tensors recorded on that tape;
    constants (no tape) never receive gradients.
    """

    __slots__ = ("data", "grad", "op", "_parents", "_bwd", "_tape")

    def __init__(self, data: np.ndarray, op: str = "leaf", parents=(), bwd=None, tape=None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._bwd = bwd
        self._tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


class Tape:
    """Recorder for one forward pass; one backward per tape unless reset."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def reset(self) -> None:
        """Discard recorded ops and allow another backward."""
        for node in self._nodes:
            node.grad = None
        self._nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad for every leaf on this tape."""
        if self._consumed:
            raise NumcoreError("backward already ran on this tape; call reset() first")
        if loss._tape is not self:
            raise NumcoreError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._bwd is None:
                continue
            for parent, g in zip(node._parents, node._bwd(node.grad)):
                if parent._tape is self:
                    parent.grad = g if parent.grad is None else parent.grad + g


def leaf(value) -> Tensor:
    """A gradient-receiving input, registered on the active tape if any."""
    t = Tensor(_as_f64(value), "leaf")
    t._tape = active_tape()
    return t


def constant(value) -> Tensor:
    """An input that never receives gradients."""
    return Tensor(_as_f64(value), "const")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _make(data: np.ndarray, op: str, parents: tuple, bwd) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p._tape is tape for p in parents):
        t = Tensor(data, op, parents, bwd, tape)
        tape._nodes.append(t)
        return t
    return Tensor(data, op)


def _scalar_or_equal(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} (broadcast is scalar-only)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # collapse the gradient of a scalar operand that was broadcast
    return g if g.shape == shape else np.asarray(np.sum(g))


# ---------------------------------------------------------------------------
# op set
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: {A.shape} @ {B.shape}")
    def bwd(g):
        return g @ B.T, A.T @ g
    return _make(A @ B, "matmul", (a, b), bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need 2 axes, got {a.data.shape}")
    def bwd(g):
        return (g.T,)
    return _make(np.ascontiguousarray(a.data.T), "transpose", (a,), bwd)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    _scalar_or_equal("add", A, B)
    def bwd(g):
        return _reduce_to(g, A.shape), _reduce_to(g, B.shape)
    return _make(A + B, "add", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    _scalar_or_equal("mul", A, B)
    def bwd(g):
        return _reduce_to(g * B, A.shape), _reduce_to(g * A, B.shape)
    return _make(A * B, "mul", (a, b), bwd)


def scale(a, s) -> Tensor:
    """Multiply by a plain (non-differentiated) scalar constant."""
    a = as_tensor(a)
    if not isinstance(s, numbers.Real):
        raise ShapeError(f"scale: factor must be a real number, got {type(s).__name__}")
    s = float(s)
    def bwd(g):
        return (g * s,)
    return _make(a.data * s, "scale", (a,), bwd)


def add_rowvec(a, v) -> Tensor:
    """Add a length-D vector to every row of a (T, D) matrix (bias add)."""
    a, v = as_tensor(a), as_tensor(v)
    A, V = a.data, v.data
    if A.ndim != 2 or V.ndim != 1 or A.shape[1] != V.shape[0]:
        raise ShapeError(f"add_rowvec: {A.shape} + {V.shape}")
    def bwd(g):
        return g, g.sum(axis=0)
    return _make(A + V, "add_rowvec", (a, v), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    def bwd(g):
        return (g * y * (1.0 - y),)
    return _make(y, "sigmoid", (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    def bwd(g):
        return (g * (1.0 - y * y),)
    return _make(y, "tanh", (a,), bwd)


def gelu(a) -> Tensor:
    """Exact erf-form GELU: x * Phi(x)."""
    a = as_tensor(a)
    X = a.data
    phi_cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))
    def bwd(g):
        pdf = np.exp(-0.5 * X * X) * _INV_SQRT_2PI
        return (g * (phi_cdf + X * pdf),)
    return _make(X * phi_cdf, "gelu", (a,), bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    X = a.data
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    y = e / e.sum(axis=-1, keepdims=True)
    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make(y, "softmax", (a,), bwd)


def log_softmax(a) -> Tensor:
    """Log of softmax over the last axis, computed stably."""
    a = as_tensor(a)
    X = a.data
    m = X.max(axis=-1, keepdims=True)
    shifted = X - m
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    def bwd(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)
    return _make(ls, "log_softmax", (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    X, G, B = x.data, gain.data, bias.data
    d = X.shape[-1]
    if G.shape != (d,) or B.shape != (d,):
        raise ShapeError(f"layer_norm: gain {G.shape} / bias {B.shape} vs features ({d},)")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    def bwd(g):
        dxhat = g * G
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        return dx, (flat_g * flat_xhat).sum(axis=0), flat_g.sum(axis=0)
    return _make(xhat * G + B, "layer_norm", (x, gain, bias), bwd)


def gather_rows(a, indices) -> Tensor:
    """Select rows by integer index; duplicate indices sum their gradients."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    A = a.data
    if A.ndim < 1 or idx.ndim != 1:
        raise ShapeError(f"gather_rows: data {A.shape}, indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= A.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {A.shape[0]} rows")
    def bwd(g):
        ga = np.zeros_like(A)
        np.add.at(ga, idx, g)
        return (ga,)
    return _make(A[idx].copy(), "gather_rows", (a,), bwd)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: no operands")
    datas = [p.data for p in parts]
    ndim = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != ndim:
            raise ShapeError(f"concat: mixed ranks {[x.shape for x in datas]}")
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in datas]} along axis {axis}") from exc
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]
    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, "concat", parts, bwd)


def masked_weighted_sum(h, w, mask=None) -> Tensor:
    """Sum of rows of h weighted by w, restricted to mask != 0.

    h is (T, D), w is (T,), mask is a constant 0/1 vector (None means all
    ones); the result is (D,).
    """
    h, w = as_tensor(h), as_tensor(w)
    H, W = h.data, w.data
    if H.ndim != 2 or W.shape != (H.shape[0],):
        raise ShapeError(f"masked_weighted_sum: h {H.shape}, w {W.shape}")
    m = np.ones(H.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != W.shape:
        raise ShapeError(f"masked_weighted_sum: mask {m.shape} vs w {W.shape}")
    mw = m * W
    def bwd(g):
        return np.outer(mw, g), m * (H @ g)
    return _make(mw @ H, "masked_weighted_sum", (h, w), bwd)


def sum_all(a) -> Tensor:
    """Sum of all elements, as a 0-d scalar."""
    a = as_tensor(a)
    A = a.data
    def bwd(g):
        return (np.full(A.shape, float(g)),)
    return _make(np.asarray(A.sum()), "sum", (a,), bwd)


def custom(inputs: Sequence[Tensor], out_data, bwd: Callable, op: str = "custom") -> Tensor:
    """Record an externally computed op with a caller-supplied backward rule.

    bwd receives the upstream gradient and must return one gradient array per
    input, shaped like that input's data.
    """
    parents = tuple(as_tensor(t) for t in inputs)
    return _make(_as_f64(out_data), op, parents, bwd)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(f, args: Sequence, step: float = 1e-6, sample=None, rng=None) -> float:
    """Max relative error between taped gradients of f and central differences.

    f must be a pure scalar function of Tensor arguments. sample limits the
    finite-difference probes per argument: an int is a element count, a float
    a fraction of elements; None checks every element. The relative error
    denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= step <= 1e-4:
        raise NumcoreError(f"grad_check step {step} outside [1e-7, 1e-4]")
    arrays = [_as_f64(a) for a in args]
    tape = Tape()
    with tape:
        leaves = [leaf(a) for a in arrays]
        out = f(*leaves)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    tape.backward(out)
    analytic = [lv.grad if lv.grad is not None else np.zeros_like(lv.data) for lv in leaves]

    def value(arrs) -> float:
        v = float(f(*[constant(a) for a in arrs]).data)
        if not np.isfinite(v):
            raise NumcoreError("grad_check: f is non-finite at a perturbed point")
        return v

    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    for i, base in enumerate(arrays):
        n = base.size
        if sample is None or n <= 1:
            flat_idx = np.arange(n)
        else:
            k = max(1, int(round(sample * n))) if isinstance(sample, float) else min(int(sample), n)
            flat_idx = rng.choice(n, size=k, replace=False)
        for j in flat_idx:
            perturbed = [a.copy() for a in arrays]
            perturbed[i].flat[j] += step
            up = value(perturbed)
            perturbed[i].flat[j] -= 2.0 * step
            down = value(perturbed)
            numeric = (up - down) / (2.0 * step)
            a_val = float(analytic[i].flat[j])
            rel = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
