"""Feasibility determination for standard-form linear systems whose target
vector is partially observed through additive Gaussian noise.

The exact mode produces a classical alternative: either a nonnegative
solution of ``A theta = b`` or a certificate ``pi`` with ``pi^T A >= 0`` and
``pi^T b < 0``.  The noisy mode treats the first ``n`` target entries as
observed with noise and tests feasibility at a stated confidence level by
running the slack-minimization pipeline with the exact rows as constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .norms import normalize_columns, parse_order
from .simplex import StandardLp, lp_solve
from .slack import (
    HypothesisSpec,
    LinearConstraint,
    SlackProblem,
    SolverOptions,
    minimize_slack,
)
from .thresholds import (
    AlphaSplit,
    NoiseModel,
    concentration_threshold,
    min_threshold,
    union_bound_threshold,
)

__all__ = [
    "FarkasCertificate",
    "NoisyLp",
    "FeasibilityVerdict",
    "farkas_certificate",
    "noisy_feasibility_test",
]


@dataclass(frozen=True)
class FarkasCertificate:
    """Exactly one of ``theta`` (feasible point) or ``pi`` (certificate)."""

    feasible: bool
    theta: np.ndarray | None = None
    pi: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "theta": None if self.theta is None else [float(v) for v in self.theta],
            "pi": None if self.pi is None else [float(v) for v in self.pi],
        }


def farkas_certificate(A, b, tol: float = 1e-8) -> FarkasCertificate:
    """Decide feasibility of ``{A theta = b, theta >= 0}`` exactly.

    Feasible systems return a witness with residual below ``tol``;
    infeasible ones return ``pi`` with ``pi @ A >= -tol`` and ``pi @ b < 0``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    res = lp_solve(StandardLp(A=A, b=b), tol=tol)
    if res.status == "optimal":
        if np.max(np.abs(A @ res.x - b)) > 10 * tol * max(1.0, np.abs(b).max()):
            raise RuntimeError("feasible point failed residual validation")
        return FarkasCertificate(feasible=True, theta=res.x)
    if res.status == "infeasible":
        return FarkasCertificate(feasible=False, pi=res.certificate)
    raise RuntimeError(f"unexpected LP status {res.status!r}")


@dataclass
class NoisyLp:
    """Standard-form system with the first ``n_noisy`` target entries observed
    through i.i.d. Gaussian noise.

    ``y_observed`` holds the noisy observations (length ``n_noisy``);
    ``b_exact`` the exactly known remaining entries.  ``instruments`` defaults
    to the noisy resource rows themselves (zero columns are dropped: a
    coordinate that never appears in a noisy row carries no signal).
    """

    A: np.ndarray
    y_observed: np.ndarray
    b_exact: np.ndarray
    sigma: float
    instruments: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.y_observed = np.asarray(self.y_observed, dtype=float).ravel()
        self.b_exact = np.asarray(self.b_exact, dtype=float).ravel()
        d, p = self.A.shape
        n = self.y_observed.shape[0]
        if n < 1 or n + self.b_exact.shape[0] != d:
            raise ValueError("row counts of y_observed and b_exact must sum to d")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def n_noisy(self) -> int:
        return self.y_observed.shape[0]

    def validate_shape(self) -> list:
        """Standard-form sanity warnings (advisory, not enforced)."""
        warnings = []
        d, p = self.A.shape
        if d > p:
            warnings.append(f"standard form expects d <= p, got d={d} > p={p}")
        if np.linalg.matrix_rank(self.A, tol=1e-10) < d:
            warnings.append("rows of A are linearly dependent (rank deficient)")
        return warnings


@dataclass
class FeasibilityVerdict:
    decision: str  # 'feasible-not-rejected' | 'infeasible-rejected'
    psi: float
    r: float
    confidence: float
    theta: np.ndarray | None
    threshold: object = None
    certificate: FarkasCertificate | None = None
    warnings: tuple = ()
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "decision": self.decision,
            "psi": self.psi,
            "r": self.r,
            "confidence": self.confidence,
            "theta": None if self.theta is None else [float(v) for v in self.theta],
            "threshold": None if self.threshold is None else self.threshold.to_dict(),
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "warnings": list(self.warnings),
            "notes": list(self.notes),
        }


def noisy_feasibility_test(nlp: NoisyLp, q="inf", alpha: float = 0.05,
                           alpha_split: AlphaSplit | None = None,
                           R: int = 10000, seed: int = 0, method: str = "min",
                           solver: SolverOptions | None = None,
                           column_scale: str = "rms",
                           stream_index: int = 0) -> FeasibilityVerdict:
    """Test whether ``{A theta = b, theta >= 0}`` can be feasible given the
    noisy observations of the first block of ``b``.

    The exactly known rows become hard constraints (if they alone are
    infeasible the verdict is immediate and exact); the noisy rows drive the
    statistic.  Feasibility is rejected at confidence ``1 - alpha`` when the
    statistic reaches the critical value.
    """
    q = parse_order(q)
    if alpha_split is None:
        alpha_split = AlphaSplit.default(alpha)
    warnings = tuple(nlp.validate_shape())
    d, p = nlp.A.shape
    n = nlp.n_noisy
    A_noisy = nlp.A[:n]
    A_exact = nlp.A[n:]

    # the exactly known subsystem decides on its own when it is empty
    if A_exact.shape[0] > 0:
        exact = farkas_certificate(A_exact, nlp.b_exact)
        if not exact.feasible:
            return FeasibilityVerdict(
                decision="infeasible-rejected", psi=math.inf, r=0.0,
                confidence=1.0, theta=None, certificate=exact,
                warnings=warnings,
                notes=("the exactly known rows already admit no nonnegative "
                       "solution; conclusion holds with certainty",))

    X_raw = nlp.instruments
    notes = []
    if X_raw is None:
        X_raw = A_noisy
        keep = np.nonzero(np.any(X_raw != 0.0, axis=0))[0]
        if keep.size == 0:
            raise ValueError("all default instrument columns are zero")
        if keep.size < X_raw.shape[1]:
            notes.append(
                f"dropped {X_raw.shape[1] - keep.size} all-zero instrument columns")
        X_raw = X_raw[:, keep]
    inst = normalize_columns(np.asarray(X_raw, dtype=float), scale=column_scale)

    noise = NoiseModel.gaussian(nlp.sigma)
    if method == "concentration" or not math.isinf(q):
        threshold = concentration_threshold(inst.X, q, noise, R, alpha_split,
                                            seed, stream_index)
    elif method == "union":
        threshold = union_bound_threshold(inst.X, nlp.sigma, alpha_split.total)
    else:
        threshold = min_threshold(
            concentration_threshold(inst.X, q, noise, R, alpha_split, seed,
                                    stream_index),
            union_bound_threshold(inst.X, nlp.sigma, alpha_split.total))

    constraints = [LinearConstraint(weights=A_exact[i], offset=0.0,
                                    lower=float(nlp.b_exact[i]),
                                    upper=float(nlp.b_exact[i]))
                   for i in range(A_exact.shape[0])]
    if not constraints:
        # hypothesis needs at least one row; nonnegativity of the first
        # coordinate is already imposed by the bounds, restate it here
        constraints = [LinearConstraint(weights=np.eye(p)[0], offset=0.0,
                                        lower=0.0, upper=math.inf)]
    bounds = np.column_stack([np.zeros(p), np.full(p, np.inf)])
    options = solver if solver is not None else SolverOptions()
    prob = SlackProblem(model=A_noisy, param_names=tuple(f"x{i+1}" for i in range(p)),
                        Y=nlp.y_observed, X=inst.X, q=q, r=threshold.value,
                        hypothesis=HypothesisSpec(tuple(constraints)),
                        bounds=bounds, options=options)
    solution = minimize_slack(prob)
    reject = bool(solution.psi >= threshold.value)
    return FeasibilityVerdict(
        decision="infeasible-rejected" if reject else "feasible-not-rejected",
        psi=solution.psi, r=threshold.value, confidence=1.0 - alpha_split.total,
        theta=solution.theta, threshold=threshold, warnings=warnings,
        notes=tuple(notes))
