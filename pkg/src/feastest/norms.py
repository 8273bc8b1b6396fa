"""l_q norm kernels, instrument-column scaling, and sublinear functionals.

The column-norm functional computed here multiplies every deviation term in
the threshold formulas, so the scaling conventions live in one place:
``rms`` scaling makes the mean square of each column equal to one, ``unit``
scaling gives each column unit Euclidean length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "parse_order",
    "lq_norm",
    "lq_norm_rows",
    "column_rms",
    "column_norm_functional",
    "normalize_columns",
    "InstrumentMatrix",
    "validate_sublinear_functional",
    "SublinearReport",
]


def parse_order(q) -> float:
    """Normalize a norm order to a float (``math.inf`` for the max norm)."""
    if isinstance(q, str):
        if q.lower() in ("inf", "infty", "infinity", "max"):
            return math.inf
        q = float(q)
    q = float(q)
    if math.isnan(q) or q < 1.0:
        raise ValueError(f"norm order must satisfy q >= 1, got {q}")
    return q


def lq_norm(v, q) -> float:
    """(sum |v_i|^q)^(1/q), with the max of absolutes for q = inf."""
    q = parse_order(q)
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    a = np.abs(v)
    if math.isinf(q):
        return float(a.max())
    if q == 1.0:
        return float(a.sum())
    if q == 2.0:
        return float(np.sqrt((a * a).sum()))
    m = a.max()
    if m == 0.0:
        return 0.0
    # factor out the max to avoid overflow for large q
    return float(m * (((a / m) ** q).sum()) ** (1.0 / q))


def lq_norm_rows(M: np.ndarray, q) -> np.ndarray:
    """Row-wise l_q norms of a 2-d array (vectorized Monte-Carlo kernel)."""
    q = parse_order(q)
    a = np.abs(np.asarray(M, dtype=float))
    if math.isinf(q):
        return a.max(axis=1)
    if q == 1.0:
        return a.sum(axis=1)
    if q == 2.0:
        return np.sqrt((a * a).sum(axis=1))
    return (a ** q).sum(axis=1) ** (1.0 / q)


def column_rms(X: np.ndarray) -> np.ndarray:
    """Per-column root mean square sqrt((1/n) sum_i X_ij^2)."""
    X = _as_matrix(X)
    return np.sqrt(np.mean(X * X, axis=0))


def column_norm_functional(X, q) -> float:
    """l_q norm of the vector of column root-mean-squares.

    Equals L^(1/q) for rms-normalized instruments (finite q) and 1 for
    q = inf; this quantity scales every deviation term in the thresholds.
    """
    return lq_norm(column_rms(_matrix_of(X)), q)


@dataclass(frozen=True)
class InstrumentMatrix:
    """An n-by-L instrument matrix together with its scaling record.

    ``scales`` holds the factor each original column was divided by, so the
    original matrix is ``X * scales``.
    """

    X: np.ndarray
    normalized: bool = False
    scale: str = "none"
    scales: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def L(self) -> int:
        return self.X.shape[1]


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError("instrument matrix must be 2-d with n >= 1, L >= 1")
    if not np.all(np.isfinite(X)):
        raise ValueError("instrument matrix contains non-finite entries")
    return X


def _matrix_of(X) -> np.ndarray:
    if isinstance(X, InstrumentMatrix):
        return X.X
    return _as_matrix(X)


def normalize_columns(X, scale: str = "rms") -> InstrumentMatrix:
    """Rescale each column of ``X`` to the requested convention.

    scale="rms" : (1/n) sum_i X_ij^2 = 1 for every column j.
    scale="unit": sum_i X_ij^2 = 1 for every column j.
    """
    X = _matrix_of(X)
    if scale == "rms":
        factors = column_rms(X)
    elif scale == "unit":
        factors = np.sqrt(np.sum(X * X, axis=0))
    else:
        raise ValueError(f"unknown column scale {scale!r} (use 'rms' or 'unit')")
    zero = np.nonzero(factors == 0.0)[0]
    if zero.size:
        raise ValueError(f"cannot normalize all-zero instrument column {zero[0]}")
    return InstrumentMatrix(X / factors, normalized=True, scale=scale, scales=factors)


@dataclass
class SublinearReport:
    """Outcome of the empirical sublinearity check for a functional."""

    n_samples: int
    homogeneity_violations: list = field(default_factory=list)
    subadditivity_violations: list = field(default_factory=list)
    norm_bound_violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.homogeneity_violations
                    or self.subadditivity_violations
                    or self.norm_bound_violations)

    def summary(self) -> str:
        if self.ok:
            return f"all three properties hold on {self.n_samples} samples"
        return ("violations: "
                f"{len(self.homogeneity_violations)} homogeneity, "
                f"{len(self.subadditivity_violations)} subadditivity, "
                f"{len(self.norm_bound_violations)} norm bound")


def validate_sublinear_functional(zeta, q, samples, tol: float = 1e-9,
                                  scale_grid=(0.5, 2.0, 7.5)) -> SublinearReport:
    """Empirically check that ``zeta`` may replace the l_q norm.

    Three properties are tested on the supplied vectors: positive
    homogeneity zeta(a z) = a zeta(z), subadditivity
    zeta(z + z') <= zeta(z) + zeta(z'), and |zeta(z)| <= ||z||_q.
    Violations are collected, not raised: they are data about the candidate.
    """
    q = parse_order(q)
    vecs = [np.asarray(z, dtype=float) for z in samples]
    if not vecs:
        raise ValueError("need at least one sample vector")
    report = SublinearReport(n_samples=len(vecs))
    for i, z in enumerate(vecs):
        fz = float(zeta(z))
        if abs(fz) > lq_norm(z, q) + tol:
            report.norm_bound_violations.append((i, fz, lq_norm(z, q)))
        for a in scale_grid:
            faz = float(zeta(a * z))
            if abs(faz - a * fz) > tol * max(1.0, abs(a * fz)):
                report.homogeneity_violations.append((i, a, faz, a * fz))
        for j, w in enumerate(vecs):
            if j < i:
                continue
            lhs = float(zeta(z + w))
            rhs = fz + float(zeta(w))
            if lhs > rhs + tol * max(1.0, abs(rhs)):
                report.subadditivity_violations.append((i, j, lhs, rhs))
    return report
