"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array; operations record their inputs and a
vector-Jacobian product on a tape, and ``backward()`` replays the tape in
reverse topological order.  The operation set is deliberately small and
fixed (arithmetic, matmul, softmax, gathers, atan2, the layer-norm
building blocks) so that every loss in the repository can be checked
against central differences with ``grad_check``.

Everything is value-semantic and float64.  Ops are pure functions of
their inputs and are safe to call concurrently on distinct data;
``RngStream`` instances are single-owner.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EvaluationError

Array = np.ndarray

# Ops that can create NaN/Inf from finite inputs (exp, log, div, ...) always
# verify their output.  STRICT_FINITE extends the check to every node (the
# test suite switches it on); at these scales the closed ops (add, matmul,
# gathers) cannot overflow finite float64 inputs.
CHECK_FINITE = True
STRICT_FINITE = False


def _finite(a: Array) -> Array:
    # A finite sum certifies every entry is finite (any NaN/Inf propagates);
    # one vectorized pass instead of isfinite + all.
    if CHECK_FINITE and not np.isfinite(a.sum()):
        raise FloatingPointError("non-finite value produced by a tensor operation")
    return a


def _finite_strict(a: Array) -> Array:
    if STRICT_FINITE and not np.isfinite(a.sum()):
        raise FloatingPointError("non-finite value produced by a tensor operation")
    return a


class Tensor:
    """Dense float64 array plus tape state for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        _finite(self.data)
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[Array] = None) -> None:
        """Accumulate gradients of this (scalar) node into every ancestor."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- sugar -----------------------------------------------------------
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

    def __pow__(self, c):
        return pow_const(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], vjp, risky: bool = False) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if risky:
        _finite(data)
    else:
        _finite_strict(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(-g, b.data.shape) if nb else None,
        )

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if na else None,
            _unbroadcast(g * a.data, b.data.shape) if nb else None,
        )

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape) if na else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if nb else None,
        )

    return _node(a.data / b.data, (a, b), vjp, risky=True)


def neg(a) -> Tensor:
    a = wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def pow_const(a, c: float) -> Tensor:
    a = wrap(a)
    c = float(c)

    def vjp(g):
        return (g * c * a.data ** (c - 1.0),)

    return _node(a.data**c, (a,), vjp, risky=True)


def exp(a) -> Tensor:
    a = wrap(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _node(out_data, (a,), vjp, risky=True)


def log(a) -> Tensor:
    a = wrap(a)

    def vjp(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), vjp, risky=True)


def sqrt(a) -> Tensor:
    a = wrap(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out_data),)

    return _node(out_data, (a,), vjp, risky=True)


def relu(a) -> Tensor:
    a = wrap(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), vjp)


def atan2(y, x) -> Tensor:
    """Elementwise angle atan2(y, x) in (-pi, pi].

    The gradient at the origin (both arguments zero) is defined as 0.
    """
    y, x = wrap(y), wrap(x)
    ny, nx = y.requires_grad, x.requires_grad
    denom = x.data * x.data + y.data * y.data
    if np.any(denom == 0.0):
        denom = np.where(denom == 0.0, np.inf, denom)

    def vjp(g):
        return (
            _unbroadcast(g * x.data / denom, y.data.shape) if ny else None,
            _unbroadcast(-g * y.data / denom, x.data.shape) if nx else None,
        )

    return _node(np.arctan2(y.data, x.data), (y, x), vjp, risky=True)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = wrap(a)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = wrap(a)
    in_shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        gg = g
        if not keepdims:
            for d in sorted(x % len(in_shape) for x in ax):
                gg = np.expand_dims(gg, d)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[x] for x in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- matmul ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.  Supports 2D @ 2D, kD @ 2D, and equal-batch kD @ kD."""
    a, b = wrap(a), wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if ad.ndim == bd.ndim and ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError("batched matmul requires identical batch dims")
    if ad.ndim != bd.ndim and bd.ndim != 2:
        raise ValueError("mixed-rank matmul only supports a 2D right operand")
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if na:
            ga = g @ np.swapaxes(bd, -1, -2)
        if nb:
            if ad.ndim == bd.ndim:
                gb = np.swapaxes(ad, -1, -2) @ g
            else:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(ad @ bd, (a, b), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = wrap(x), wrap(gain), wrap(bias)
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    nx, ng, nb = x.requires_grad, gain.requires_grad, bias.requires_grad

    def vjp(g):
        gx = gg = gb = None
        if nx:
            gy = g * gain.data
            gx = inv * (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gy * xhat, axis=-1, keepdims=True)
            )
        if ng:
            gg = _unbroadcast(g * xhat, gain.data.shape)
        if nb:
            gb = _unbroadcast(g, bias.data.shape)
        return gx, gg, gb

    return _node(xhat * gain.data + bias.data, (x, gain, bias), vjp, risky=True)


# -- softmax and the classification head ------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return _node(out_data, (a,), vjp, risky=True)


def nll_from_logits(
    logits: Tensor,
    targets: Array,
    weights: Array,
    smoothing: float = 0.0,
) -> Tensor:
    """Weighted mean negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is (T, V); ``targets`` (T,) int ids; ``weights`` (T,)
    non-negative with positive sum (zero marks padding).  With label
    smoothing ``s`` the per-position loss is
    ``(1-s) * (lse - x_y) + s * (lse - mean_t x_t)``.
    """
    logits = wrap(logits)
    x = logits.data
    t = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if x.ndim != 2 or t.shape != (x.shape[0],) or w.shape != (x.shape[0],):
        raise ValueError("nll_from_logits shape mismatch")
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("nll_from_logits requires a positive weight sum")
    n, v = x.shape
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    rows = np.arange(n)
    nll = lse - x[rows, t]
    if smoothing:
        nll = (1.0 - smoothing) * nll + smoothing * (lse - x.mean(axis=1))
    value = float((nll * w).sum() / wsum)

    def vjp(g):
        d = e / z
        if smoothing:
            d[rows, t] -= 1.0 - smoothing
            d -= smoothing / v
        else:
            d[rows, t] -= 1.0
        d *= (w / wsum)[:, None] * float(g)
        return (d,)

    return _node(np.float64(value), (logits,), vjp, risky=True)


# -- gathers ----------------------------------------------------------------


def take_rows(a, idx, unique: bool = False) -> Tensor:
    """Gather rows ``a[idx]``; scatter-add on the way back.

    ``unique=True`` promises the indices are distinct, enabling a direct
    scatter instead of the accumulating one.
    """
    a = wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError("take_rows index out of range")

    def vjp(g):
        rest = a.data.shape[1:]
        g2 = g.reshape((-1,) + rest)
        flat = idx.ravel()
        if unique:
            out = np.zeros_like(a.data)
            out[flat] = g2
        else:
            width = int(np.prod(rest)) if rest else 1
            cells = flat * width if not rest else (flat[:, None] * width + np.arange(width)).ravel()
            out = np.bincount(cells, weights=g2.ravel(), minlength=a.data.size).reshape(
                a.data.shape
            )
        return (out,)

    return _node(a.data[idx], (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    """View of a[..., start:stop] with a zero-padded gradient."""
    a = wrap(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        return (out,)

    return _node(a.data[..., start:stop], (a,), vjp)


def take_flat(a, flat_idx) -> Tensor:
    """Gather arbitrary elements by flat index (output shaped like the index)."""
    a = wrap(a)
    flat_idx = np.asarray(flat_idx, dtype=np.int64)

    def vjp(g):
        out = np.bincount(
            flat_idx.ravel(), weights=g.ravel(), minlength=a.data.size
        )
        return (out.reshape(a.data.shape),)

    return _node(a.data.ravel()[flat_idx], (a,), vjp)


# -- verification ------------------------------------------------------------


def grad_check(
    f: Callable[[Array], tuple[float, Array]],
    x: Array,
    eps: float = 1e-5,
    value_fn: Optional[Callable[[Array], float]] = None,
) -> float:
    """Max relative error of f's analytic gradient vs central differences.

    ``f(x)`` returns ``(value, gradient)``.  The error at each coordinate is
    ``|analytic - central| / (|central| + 1e-8)``; the max is returned.
    ``value_fn``, when given, is a cheaper value-only evaluation used for
    the perturbed points.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    value, grad = f(x)
    if not np.isfinite(value):
        raise EvaluationError("f(x) is not finite at the evaluation point")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError("analytic gradient shape does not match x")
    fv = value_fn if value_fn is not None else (lambda z: f(z)[0])
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += eps
        xm = x.copy()
        xm.flat[i] -= eps
        central = (fv(xp) - fv(xm)) / (2.0 * eps)
        err = abs(grad.flat[i] - central) / (abs(central) + 1e-8)
        worst = max(worst, err)
    return worst


# -- randomness ---------------------------------------------------------------


class RngStream:
    """Deterministic random stream (counter-based Philox generator).

    The same 64-bit seed produces the same draw sequence on every platform.
    Child streams derived with :meth:`split` are keyed by a SHA-256 hash of
    ``(seed, label)`` so independent consumers never share draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, size=None) -> Array:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> Array:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> Array:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def choice_without_replacement(self, pool, k: int) -> Array:
        return self._gen.choice(np.asarray(pool), size=k, replace=False)

    def split(self, label: str) -> "RngStream":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))

    def __repr__(self):
        return f"RngStream(seed={self.seed})"
