"""Sliced angular dispersion of unit vectors.

A set of directions is projected onto random great circles (orthonormal
pairs (P, Q)); on each circle the squared deviation of consecutive
circular gaps from the uniform spacing 2*pi/N scores how far the
projected angles are from an equidistant configuration.  The Monte Carlo
mean over circles is differentiable in the directions (sorting is held
fixed at the evaluation point), which makes it usable as a training
regularizer against representation collapse.

Slices are independent; per-slice work may run in parallel with
gradients reduced in slice order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .errors import (
    ArityError,
    DegenerateInputError,
    DispersionUndefinedError,
    PoolTooSmallError,
    SliceDegenerateError,
)

TWO_PI = 2.0 * np.pi
UNIT_TOL = 1e-9
MIN_PROJ = 1e-8

# Gap deviations at or below this size are representation noise: a float
# angle grid can be off a truly equidistant real configuration by a few
# ulp of 2*pi, and those grids must score exactly zero.
GAP_SNAP = 1e-14


@dataclass(frozen=True)
class GreatCircle:
    """Orthonormal pair spanning a 2-plane through the origin."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
            raise ValueError("P and Q must be vectors of equal dimension")
        if abs(np.linalg.norm(p) - 1.0) > UNIT_TOL or abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise ValueError("P and Q must be unit vectors")
        if abs(float(p @ q)) > UNIT_TOL:
            raise ValueError("P and Q must be orthogonal")


class DirectionSet:
    """N unit-norm rows in R^d (tolerance 1e-9), N >= 2, d >= 2."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
            raise ArityError("DirectionSet needs an (N>=2, d>=2) matrix")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("DirectionSet rows must be unit norm within 1e-9")
        self.matrix = m

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "DirectionSet":
        """Row-normalize arbitrary nonzero rows into a DirectionSet."""
        rows = np.asarray(rows, dtype=np.float64)
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("cannot normalize a zero row")
        return cls(rows / norms[:, None])

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def sample_great_circles(dim: int, count: int, rng: RngStream):
    """Draw ``count`` uniform great circles; returns (P, Q) of shape (count, dim).

    Two standard-normal vectors are Gram-Schmidt orthonormalized; draws
    whose residual norm falls below 1e-12 are resampled internally.
    """
    if dim < 2:
        raise ValueError("great circles need dimension >= 2")
    if count < 1:
        raise ValueError("count must be >= 1")
    p = np.empty((count, dim))
    q = np.empty((count, dim))
    pending = np.arange(count)
    while pending.size:
        x = rng.normal((pending.size, dim))
        y = rng.normal((pending.size, dim))
        xn = np.linalg.norm(x, axis=1)
        ok = xn >= 1e-12
        px = x / np.where(ok, xn, 1.0)[:, None]
        resid = y - (np.sum(y * px, axis=1))[:, None] * px
        rn = np.linalg.norm(resid, axis=1)
        ok &= rn >= 1e-12
        rows = pending[ok]
        p[rows] = px[ok]
        q[rows] = resid[ok] / rn[ok][:, None]
        pending = pending[~ok]
    return p, q


def sample_great_circle(dim: int, rng: RngStream) -> GreatCircle:
    p, q = sample_great_circles(dim, 1, rng)
    return GreatCircle(p[0], q[0])


def project_to_circle_angles(
    dirs: DirectionSet, circle: GreatCircle, min_proj: float = MIN_PROJ
):
    """Angles atan2(<z,Q>, <z,P>) of the rows whose in-plane projection has
    norm >= ``min_proj``; returns (angles, kept_row_indices)."""
    a = dirs.matrix @ circle.p
    b = dirs.matrix @ circle.q
    kept = np.hypot(a, b) >= min_proj
    if int(kept.sum()) < 2:
        raise SliceDegenerateError("fewer than two rows project onto this circle")
    idx = np.nonzero(kept)[0]
    return np.arctan2(b[kept], a[kept]), idx


def circle_gap_deviation(angles) -> float:
    """Squared deviation of consecutive circular gaps from uniform spacing.

    Angles are sorted on the circle; the N gaps (wrapping last to first)
    sum to 2*pi, and the score is sum_k (g_k - 2*pi/N)^2: zero exactly on
    equidistant configurations, rotation- and permutation-invariant.
    Deviations within GAP_SNAP (a few ulp of 2*pi) are treated as exact
    zeros so float renderings of equidistant grids score 0.0.
    """
    a = np.asarray(angles, dtype=np.float64).ravel()
    n = a.size
    if n < 2:
        raise ArityError("need at least two angles")
    a = np.sort(np.mod(a, TWO_PI))
    gaps = np.empty(n)
    gaps[:-1] = np.diff(a)
    gaps[-1] = a[0] + TWO_PI - a[-1]
    dev = gaps - TWO_PI / n
    dev[np.abs(dev) <= GAP_SNAP] = 0.0
    return float(dev @ dev)


def dispersion_node(
    z: Tensor, p: np.ndarray, q: np.ndarray, min_proj: float = MIN_PROJ
) -> Tensor:
    """Differentiable sliced-dispersion scalar for raw (not yet normalized)
    rows ``z`` against fixed circles (p, q) of shape (S, d).

    Rows are renormalized inside the graph, so gradients are tangent to the
    sphere.  Rows whose projection onto a circle falls below ``min_proj``
    are excluded from that slice and receive no gradient from it; slices
    with fewer than two surviving rows are skipped.  Sorting is treated as
    a fixed assignment at the evaluation point.
    """
    z = ad.wrap(z)
    n = z.shape[0]
    s = p.shape[0]
    sq = ad.sum_(ad.mul(z, z), axis=1, keepdims=True)
    u = ad.div(z, ad.sqrt(sq))
    a = ad.matmul(u, Tensor(p.T))  # (N, S)
    b = ad.matmul(u, Tensor(q.T))
    kept = a.data**2 + b.data**2 >= min_proj**2
    counts = kept.sum(axis=0)
    valid = counts >= 2
    if not valid.any():
        raise DispersionUndefinedError("every slice is degenerate")
    total = None

    def acc(t):
        nonlocal total
        total = t if total is None else ad.add(total, t)

    def gap_score(phi_sorted_hi, phi_sorted_lo, first, last, m):
        c = TWO_PI / m
        di = ad.sub(ad.sub(phi_sorted_hi, phi_sorted_lo), c)
        dw = ad.sub(ad.add(ad.sub(first, last), TWO_PI), c)
        return ad.add(ad.sum_(ad.mul(di, di)), ad.sum_(ad.mul(dw, dw)))

    if kept.all():
        phi = ad.atan2(b, a)
        order = np.argsort(phi.data, axis=0, kind="stable")
        flat = order * s + np.arange(s)[None, :]
        acc(
            gap_score(
                ad.take_flat(phi, flat[1:, :]),
                ad.take_flat(phi, flat[:-1, :]),
                ad.take_flat(phi, flat[0, :]),
                ad.take_flat(phi, flat[-1, :]),
                n,
            )
        )
    else:
        full = counts == n
        if full.any():
            cols = np.nonzero(full)[0]
            idx = np.arange(n)[:, None] * s + cols[None, :]
            phi = ad.atan2(ad.take_flat(b, idx), ad.take_flat(a, idx))  # (N, C)
            order = np.argsort(phi.data, axis=0, kind="stable")
            flat = order * cols.size + np.arange(cols.size)[None, :]
            acc(
                gap_score(
                    ad.take_flat(phi, flat[1:, :]),
                    ad.take_flat(phi, flat[:-1, :]),
                    ad.take_flat(phi, flat[0, :]),
                    ad.take_flat(phi, flat[-1, :]),
                    n,
                )
            )
        for col in np.nonzero(valid & ~full)[0]:
            rows = np.nonzero(kept[:, col])[0]
            idx = rows * s + col
            phi_c = ad.atan2(ad.take_flat(b, idx), ad.take_flat(a, idx))
            order = np.argsort(phi_c.data, kind="stable")
            acc(
                gap_score(
                    ad.take_flat(phi_c, order[1:]),
                    ad.take_flat(phi_c, order[:-1]),
                    ad.take_flat(phi_c, order[:1]),
                    ad.take_flat(phi_c, order[-1:]),
                    rows.size,
                )
            )
    return ad.mul(total, 1.0 / float(valid.sum()))


def sliced_dispersion(
    dirs: DirectionSet,
    num_slices: int,
    rng: RngStream,
    min_proj: float = MIN_PROJ,
):
    """Monte Carlo sliced dispersion of a DirectionSet with fresh circles.

    Returns ``(value, grad)`` where ``grad`` has the shape of the direction
    matrix and is the exact gradient of the Monte Carlo value (circles held
    fixed).
    """
    if num_slices < 1:
        raise ValueError("num_slices must be >= 1")
    p, q = sample_great_circles(dirs.dim, num_slices, rng)
    z = Tensor(dirs.matrix, requires_grad=True)
    node = dispersion_node(z, p, q, min_proj)
    node.backward()
    return float(node.data), z.grad


def subsample_rare_rows(
    emb: np.ndarray, vocab, k: int, rng: RngStream
):
    """Uniformly sample ``k`` distinct rare-token rows of the embedding table.

    Rare means frequency rank above half the vocabulary size (the pool the
    regularizer draws from).  Returns (DirectionSet of normalized rows,
    sampled token ids) so gradients can be routed back to the table.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    pool = np.asarray(vocab.rare_token_ids(), dtype=np.int64)
    if pool.size < 2:
        raise PoolTooSmallError(
            f"rare-token pool has {pool.size} entries; need at least 2"
        )
    k = min(k, pool.size)
    ids = np.sort(rng.choice_without_replacement(pool, k))
    rows = np.asarray(emb, dtype=np.float64)[ids]
    return DirectionSet.from_rows(rows), ids
