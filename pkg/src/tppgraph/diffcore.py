"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity lives in a :class:`Tensor` holding a numpy
array, an (initially empty) gradient buffer and closures that propagate
adjoints to parent tensors.  The op set is deliberately small: elementwise
arithmetic, matrix products, the handful of transcendentals the intensity
families need, reductions, and structural ops (concat / gather /
mask-select / reshape).  Shapes are restricted to 0-, 1- and 2-d arrays;
broadcasting follows numpy but only between a matrix and a scalar, a row
vector or a column vector.

Graphs are rebuilt on every forward pass, confined to a single worker, and
freed by ordinary reference counting once the loss tensor goes away.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DomainError",
    "ShapeError",
    "backward",
    "grad_check",
    "forward_op",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "erf",
    "tanh",
    "sigmoid",
    "softplus",
    "softmax",
    "arctan",
    "sin",
    "cos",
    "tsum",
    "tmean",
    "concat",
    "gather",
    "mask_select",
    "power",
    "negate",
    "clamp",
    "dft_magnitude",
    "reshape",
    "logsumexp_rows",
]


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction inside its scope."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"tensors are limited to <=2 dimensions, got shape {a.shape}")
    return a


class Tensor:
    """A node of the computation graph.

    ``value`` is the forward result, ``grad`` accumulates d(root)/d(self)
    after :func:`backward`, and ``_parents`` / ``_backprop`` record how to
    push adjoints upstream.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, value, requires_grad: bool = False,
                 parents: tuple = (), backprop: Callable[[], None] | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        track = _GRAD_ENABLED and (requires_grad or any(p.requires_grad for p in parents))
        self.requires_grad = track
        self._parents = parents if track else ()
        self._backprop = backprop if track else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray):
    """Allow same-shape, scalar-with-anything, and matrix/row/column pairs."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not conform") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value)
    out = Tensor(a.value + b.value, parents=(a, b))

    def backprop():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value)
    out = Tensor(a.value - b.value, parents=(a, b))

    def backprop():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.value.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value)
    out = Tensor(a.value * b.value, parents=(a, b))

    def backprop():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.value, b.value)
    if np.any(b.value == 0.0):
        raise DomainError("division by zero")
    out = Tensor(a.value / b.value, parents=(a, b))

    def backprop():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul requires 1-d or 2-d operands")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} @ {bv.shape} do not conform")
    out = Tensor(av @ bv, parents=(a, b))

    def backprop():
        g = out.grad
        if a.requires_grad:
            if av.ndim == 1 and bv.ndim == 1:          # dot -> scalar
                a._accumulate(g * bv)
            elif bv.ndim == 1:                         # (m,n)@(n,) -> (m,)
                a._accumulate(np.outer(g, bv))
            elif av.ndim == 1:                         # (n,)@(n,p) -> (p,)
                a._accumulate(bv @ g)
            else:
                a._accumulate(g @ bv.T)
        if b.requires_grad:
            if av.ndim == 1 and bv.ndim == 1:
                b._accumulate(g * av)
            elif bv.ndim == 1:
                b._accumulate(av.T @ g)
            elif av.ndim == 1:
                b._accumulate(np.outer(av, g))
            else:
                b._accumulate(av.T @ g)

    out._backprop = backprop if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def negate(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.value, parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(-out.grad)

    out._backprop = backprop if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * out.value)

    out._backprop = backprop if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive value")
    out = Tensor(np.log(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad / a.value)

    out._backprop = backprop if out.requires_grad else None
    return out


# Abramowitz-Stegun 7.1.26 rational approximation, |error| <= 1.5e-7.
_ERF_P = 0.3275911
_ERF_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def _erf_values(x: np.ndarray) -> np.ndarray:
    sign = np.sign(x)
    ax = np.abs(x)
    t = 1.0 / (1.0 + _ERF_P * ax)
    poly = t * (_ERF_A[0] + t * (_ERF_A[1] + t * (_ERF_A[2] + t * (_ERF_A[3] + t * _ERF_A[4]))))
    return sign * (1.0 - poly * np.exp(-ax * ax))


def erf(a: Tensor) -> Tensor:
    """Gauss error function; derivative is the analytic 2/sqrt(pi)*exp(-x^2)."""
    a = _wrap(a)
    out = Tensor(_erf_values(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * _TWO_OVER_SQRT_PI * np.exp(-a.value * a.value))

    out._backprop = backprop if out.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.tanh(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - out.value * out.value))

    out._backprop = backprop if out.requires_grad else None
    return out


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(_sigmoid_values(np.atleast_1d(a.value)).reshape(a.value.shape), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * out.value * (1.0 - out.value))

    out._backprop = backprop if out.requires_grad else None
    return out


def softplus(a: Tensor) -> Tensor:
    a = _wrap(a)
    v = a.value
    out = Tensor(np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * _sigmoid_values(np.atleast_1d(v)).reshape(v.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def arctan(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.arctan(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad / (1.0 + a.value * a.value))

    out._backprop = backprop if out.requires_grad else None
    return out


def sin(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sin(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * np.cos(a.value))

    out._backprop = backprop if out.requires_grad else None
    return out


def cos(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.cos(a.value), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(-out.grad * np.sin(a.value))

    out._backprop = backprop if out.requires_grad else None
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _wrap(a)
    if isinstance(exponent, Tensor):
        raise ShapeError("power supports constant exponents only; use exp(y*log(x)) otherwise")
    p = float(exponent)
    if p != int(p) and np.any(a.value < 0.0):
        raise DomainError("fractional power of negative value")
    out = Tensor(np.power(a.value, p), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * p * np.power(a.value, p - 1.0))

    out._backprop = backprop if out.requires_grad else None
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 inside the interval and 0 outside."""
    a = _wrap(a)
    out = Tensor(np.clip(a.value, lo, hi), parents=(a,))
    inside = (a.value >= lo) & (a.value <= hi)

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad * inside)

    out._backprop = backprop if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# reductions and structural ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backprop():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    out._backprop = backprop if out.requires_grad else None
    return out


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.value.mean(axis=axis, keepdims=keepdims), parents=(a,))
    denom = a.value.size if axis is None else a.value.shape[axis]

    def backprop():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.value.shape) / denom)

    out._backprop = backprop if out.requires_grad else None
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, parents=(a,))

    def backprop():
        if a.requires_grad:
            g = out.grad
            inner = (g * s).sum(axis=axis, keepdims=True)
            a._accumulate(s * (g - inner))

    out._backprop = backprop if out.requires_grad else None
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    values = [np.atleast_1d(t.value) for t in tensors]
    out = Tensor(np.concatenate(values, axis=axis), parents=tuple(tensors))
    sizes = [v.shape[axis] for v in values]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backprop():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t._accumulate(g[tuple(sl)].reshape(t.value.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows (axis=0) or columns (axis=1); adjoint scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    if np.any(idx < 0) or np.any(idx >= a.value.shape[axis]):
        raise IndexError(f"gather index out of range for axis {axis} of shape {a.value.shape}")
    out = Tensor(np.take(a.value, idx, axis=axis), parents=(a,))

    def backprop():
        if a.requires_grad:
            g = np.zeros_like(a.value)
            if axis == 0:
                np.add.at(g, idx, out.grad)
            else:
                gt = np.swapaxes(np.zeros_like(a.value), 0, axis)
                np.add.at(gt, idx, np.swapaxes(out.grad, 0, axis))
                g = np.swapaxes(gt, 0, axis)
            a._accumulate(g)

    out._backprop = backprop if out.requires_grad else None
    return out


def mask_select(a: Tensor, mask) -> Tensor:
    """Boolean selection (row-major flattening) with scatter-back adjoint."""
    a = _wrap(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.value.shape:
        raise ShapeError(f"mask shape {m.shape} does not match tensor shape {a.value.shape}")
    out = Tensor(a.value[m], parents=(a,))

    def backprop():
        if a.requires_grad:
            g = np.zeros_like(a.value)
            g[m] = out.grad
            a._accumulate(g)

    out._backprop = backprop if out.requires_grad else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.value.reshape(shape), parents=(a,))

    def backprop():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.value.shape))

    out._backprop = backprop if out.requires_grad else None
    return out


def dft_magnitude(a: Tensor, axis: int = 0) -> Tensor:
    """Magnitude spectrum of a real signal via a direct O(N^2) transform.

    For input x of length N along ``axis``: |X_k| with
    X_k = sum_n x_n exp(-2*pi*i*k*n/N).  Adjoints flow through the
    magnitudes (at a zero bin the subgradient 0 is used).
    """
    a = _wrap(a)
    v = a.value
    n = v.shape[axis] if v.ndim > 0 else 1
    if v.ndim == 0:
        raise ShapeError("dft-magnitude requires a 1-d or 2-d input")
    k = np.arange(n)
    ang = 2.0 * np.pi * np.outer(k, k) / n
    c_mat, s_mat = np.cos(ang), np.sin(ang)
    if axis == 0:
        re, im = c_mat @ v, -(s_mat @ v)
    else:
        re, im = v @ c_mat.T, -(v @ s_mat.T)
    mag = np.sqrt(re * re + im * im)
    out = Tensor(mag, parents=(a,))

    def backprop():
        if a.requires_grad:
            safe = np.where(mag > 0.0, mag, 1.0)
            gre = out.grad * re / safe
            gim = out.grad * im / safe
            if axis == 0:
                a._accumulate(c_mat.T @ gre - s_mat.T @ gim)
            else:
                a._accumulate(gre @ c_mat - gim @ s_mat)

    out._backprop = backprop if out.requires_grad else None
    return out


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp(.))) of a 2-d tensor, returned as a column."""
    a = _wrap(a)
    shift = a.value.max(axis=1, keepdims=True)          # constant shift, exact identity
    return log(tsum(exp(sub(a, Tensor(shift))), axis=1, keepdims=True)) + Tensor(shift)


# ---------------------------------------------------------------------------
# backward pass and numeric verification
# ---------------------------------------------------------------------------

def backward(root: Tensor):
    """Populate ``grad`` for every tensor reachable from a scalar ``root``."""
    if root.value.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop()


def grad_check(f: Callable[..., Tensor], points: Iterable[np.ndarray] | np.ndarray,
               step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps one tensor per entry of ``points`` to a scalar tensor.
    Returns the maximum elementwise relative error, with denominator
    max(|g|, 1e-8) over both gradient estimates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(points, np.ndarray):
        points = [points]
    arrays = [np.array(p, dtype=np.float64) for p in points]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    if not np.all(np.isfinite(out.value)):
        raise DomainError("non-finite forward value in grad_check")
    backward(out)

    worst = 0.0
    for pos, arr in enumerate(arrays):
        g_ad = leaves[pos].grad
        if g_ad is None:
            g_ad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(f(*[Tensor(a) for a in arrays]).value)
            flat[j] = orig - step
            lo = float(f(*[Tensor(a) for a in arrays]).value)
            flat[j] = orig
            g_fd = (hi - lo) / (2.0 * step)
            g_rm = g_ad.reshape(-1)[j]
            denom = max(abs(g_rm), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_rm - g_fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# op-kind dispatch
# ---------------------------------------------------------------------------

_OP_TABLE: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "erf": erf,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax": softmax,
    "arctan": arctan,
    "sin": sin,
    "cos": cos,
    "sum": tsum,
    "mean": tmean,
    "concat": lambda *ts, **kw: concat(list(ts), **kw),
    "gather": gather,
    "mask-select": mask_select,
    "power": power,
    "negate": negate,
    "clamp": clamp,
    "dft-magnitude": dft_magnitude,
    "reshape": reshape,
}


def forward_op(name: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the op named ``name`` to ``inputs`` (see ``_OP_TABLE`` keys)."""
    if name not in _OP_TABLE:
        raise KeyError(f"unknown op-kind {name!r}")
    return _OP_TABLE[name](*inputs, **kwargs)
