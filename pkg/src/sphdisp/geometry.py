"""Collapse diagnostics for representation matrices.

Three scalar summaries of an (N, d) matrix of token/position vectors:

* average pairwise cosine similarity (1 = complete directional collapse),
* entropy of the normalized eigenvalue spectrum of the d x d Gram matrix
  (0 = rank-1 collapse, ln min(N, d) = variance spread evenly),
* spherical variance, 1 - || mean of unit rows || (0 = all directions agree).

All three are permutation-invariant; the cosine and spherical metrics are
additionally invariant to positive row rescaling, and the spectral entropy
to orthogonal rotation.  Pure functions; safe to call in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ArityError, DegenerateInputError

COMPONENTS = ("H", "E", "F")

# Eigenvalues below this fraction of the trace are treated as numerical rank
# deficiency and dropped before the spectrum is normalized.
EIG_FLOOR = 1e-12


def _unit_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("expected an (N, d) matrix")
    norms = np.linalg.norm(z, axis=1)
    if not np.all(np.isfinite(z)):
        raise DegenerateInputError("matrix contains non-finite entries")
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm row in a directional metric")
    return z / norms[:, None]


def avg_cosine(z: np.ndarray) -> float:
    """Mean cosine similarity over all unordered row pairs.

    Computed as (||sum of unit rows||^2 - N) / (N (N - 1)), which equals the
    pairwise sum exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ArityError("avg_cosine needs at least two rows")
    u = _unit_rows(z)
    s = u.sum(axis=0)
    val = (float(s @ s) - n) / (n * (n - 1))
    return float(min(1.0, max(-1.0, val)))


def matrix_entropy(z: np.ndarray, alpha: float = 1.0, center: bool = False) -> float:
    """Renyi entropy of the normalized Gram-spectrum of ``z``.

    Eigenvalues of z^T z (d x d; same nonzero spectrum as z z^T) are floored
    at ``EIG_FLOOR`` of the trace, renormalized to a distribution, and fed to
    the order-``alpha`` Renyi entropy (Shannon at alpha = 1).  Natural log.
    ``center`` subtracts the column mean first (off by default).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("expected an (N, d) matrix")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if center:
        z = z - z.mean(axis=0, keepdims=True)
    gram = z.T @ z
    w = np.linalg.eigvalsh(gram)
    w = np.clip(w, 0.0, None)
    trace = w.sum()
    if trace <= 0.0:
        raise DegenerateInputError("all-zero matrix has no spectrum")
    w = w[w >= EIG_FLOOR * trace]
    lam = w / w.sum()
    if abs(alpha - 1.0) < 1e-12:
        ent = float(-(lam * np.log(lam)).sum())
    else:
        ent = float(np.log((lam**alpha).sum()) / (1.0 - alpha))
    return max(0.0, ent)


def spherical_variance(z: np.ndarray) -> float:
    """1 - || mean of row directions ||; 0 when all rows point one way."""
    u = _unit_rows(z)
    m = u.mean(axis=0)
    return float(min(1.0, max(0.0, 1.0 - np.linalg.norm(m))))


@dataclass
class MetricRecord:
    """One probe of the three collapse metrics for one model component."""

    step: int
    component: str  # "H" (decoder output), "E" (decoder embeddings), "F" (encoder output)
    avg_cos: float
    matrix_entropy: float
    spherical_variance: float

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"component must be one of {COMPONENTS}")
        if not -1.0 <= self.avg_cos <= 1.0:
            raise ValueError("avg_cos out of [-1, 1]")
        if self.matrix_entropy < 0.0:
            raise ValueError("matrix_entropy must be >= 0")
        if not 0.0 <= self.spherical_variance <= 1.0:
            raise ValueError("spherical_variance out of [0, 1]")

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "component": self.component,
                "avg_cos": self.avg_cos,
                "entropy": self.matrix_entropy,
                "svar": self.spherical_variance,
            }
        )

    @classmethod
    def from_json_line(cls, line: str) -> "MetricRecord":
        obj = json.loads(line)
        return cls(
            step=int(obj["step"]),
            component=obj["component"],
            avg_cos=float(obj["avg_cos"]),
            matrix_entropy=float(obj["entropy"]),
            spherical_variance=float(obj["svar"]),
        )


def metrics_for(z: np.ndarray, step: int, component: str) -> MetricRecord:
    return MetricRecord(
        step=step,
        component=component,
        avg_cos=avg_cosine(z),
        matrix_entropy=matrix_entropy(z),
        spherical_variance=spherical_variance(z),
    )


def write_metric_log(path, records, meta: dict | None = None) -> None:
    """Write records as JSONL; an optional first meta line carries the
    config hash and seed so the file is self-describing."""
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for rec in records:
            fh.write(rec.to_json_line() + "\n")


def read_metric_log(path) -> list[MetricRecord]:
    """Parse a metric JSONL file, skipping any leading meta line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "\"step\"" not in line:
                continue  # meta line
            records.append(MetricRecord.from_json_line(line))
    return records
