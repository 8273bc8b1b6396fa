"""Hypothesis tests, confidence regions, and power diagnostics.

``run_test`` wires the pieces together: build and scale instruments, compute
the critical value (concentration, union bound, or their minimum), minimize
the slack over the constrained parameter set, and decide.  The decision rule
rejects exactly when the statistic reaches the critical value; ties count as
rejections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .expressions import Expression, parse_expression
from .norms import normalize_columns, parse_order
from .slack import (
    ExprConstraint,
    HypothesisSpec,
    InfeasibleConstraintsError,
    LinearConstraint,
    SlackProblem,
    SlackSolution,
    SolverOptions,
    minimize_slack,
)
from .thresholds import (
    AlphaSplit,
    NoiseModel,
    Threshold,
    concentration_threshold,
    min_threshold,
    rademacher_threshold,
    sigma_upper_bound,
    union_bound_threshold,
)

__all__ = [
    "PowerDiagnostics",
    "ConfidenceRegion",
    "TestReport",
    "build_instruments",
    "make_hypothesis",
    "power_feasibility_check",
    "run_test",
    "confidence_region",
    "bounded_response_test",
]


@dataclass(frozen=True)
class PowerDiagnostics:
    """Dimension bookkeeping that predicts whether separation is attainable."""

    p: int
    n: int
    m: int
    L: int | None
    q: float
    warnings: tuple

    def to_dict(self) -> dict:
        return {"p": self.p, "n": self.n, "m": self.m, "L": self.L,
                "q": "inf" if math.isinf(self.q) else self.q,
                "warnings": list(self.warnings)}


def power_feasibility_check(p: int, n: int, m: int, L: int | None = None,
                            q="inf") -> PowerDiagnostics:
    """Flag dimension regimes in which the test cannot have power.

    With more parameters than observations and few restrictions the data can
    be interpolated inside the constraint set, so separation is out of reach;
    for the max norm a second regime needs enough instruments on top of the
    restrictions.
    """
    q = parse_order(q)
    warnings = []
    if p > n and m <= p - n:
        warnings.append(
            "separation likely unattainable: m <= p - n, the constrained model "
            "can interpolate the data")
    if (math.isinf(q) and L is not None and p - n < m < p and L + m <= p):
        warnings.append(
            "separation likely unattainable for the max norm: L + m <= p, the "
            "moment conditions can be zeroed inside the constraint set")
    return PowerDiagnostics(p=p, n=n, m=m, L=L, q=q, warnings=tuple(warnings))


@dataclass(frozen=True)
class ConfidenceRegion:
    """Interval for the instrumented discrepancy norm at level 1 - alpha."""

    lower: float
    upper: float
    level: float

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "level": self.level,
                "length": self.length}


@dataclass
class TestReport:
    """Everything a decision rests on, serializable for audits."""

    psi: float
    threshold: Threshold
    reject: bool
    decision: str  # 'reject' | 'fail-to-reject' | 'infeasible-constraints'
    theta: np.ndarray | None
    mu: float
    alpha: float
    effective_level: float
    q: float
    method: str
    solution: SlackSolution | None
    diagnostics: PowerDiagnostics
    seed: int
    stream_index: int
    noise: dict
    column_scale: str
    scales: np.ndarray | None = None
    notes: tuple = ()

    def to_dict(self) -> dict:
        return {
            "psi": self.psi,
            "threshold": self.threshold.to_dict(),
            "reject": self.reject,
            "decision": self.decision,
            "theta": None if self.theta is None else [float(t) for t in self.theta],
            "mu": self.mu,
            "alpha": self.alpha,
            "effective_level": self.effective_level,
            "q": "inf" if math.isinf(self.q) else self.q,
            "method": self.method,
            "solver": None if self.solution is None else self.solution.to_dict(),
            "diagnostics": self.diagnostics.to_dict(),
            "seed": self.seed,
            "stream_index": self.stream_index,
            "noise": dict(self.noise),
            "column_scale": self.column_scale,
            "instrument_scales": None if self.scales is None else
                [float(s) for s in self.scales],
            "notes": list(self.notes),
        }


def build_instruments(data: dict, spec, n: int) -> np.ndarray:
    """Materialize the instrument matrix from its specification.

    ``spec`` may be an explicit array, ``{"powers": d}`` (all covariate
    columns raised to powers 1..d), or a list of expression strings over the
    covariates.
    """
    if isinstance(spec, np.ndarray) or (isinstance(spec, (list, tuple))
                                        and spec and not isinstance(spec[0], str)):
        X = np.asarray(spec, dtype=float)
        if X.ndim != 2 or X.shape[0] != n:
            raise ValueError("explicit instrument matrix must be n x L")
        return X
    if isinstance(spec, dict) and set(spec) == {"powers"}:
        d = int(spec["powers"])
        if d < 1:
            raise ValueError("instrument powers must be >= 1")
        cols = []
        for name in data:
            col = np.asarray(data[name], dtype=float)
            for e in range(1, d + 1):
                cols.append(col ** e)
        return np.column_stack(cols)
    if isinstance(spec, (list, tuple)) and all(isinstance(s, str) for s in spec):
        cols = []
        names = tuple(data)
        for text in spec:
            expr = parse_expression(text, (), names)
            v = expr.eval({}, data)
            cols.append(np.full(n, v) if np.isscalar(v) else v)
        return np.column_stack(cols)
    raise ValueError(f"cannot interpret instrument specification {spec!r}")


def make_hypothesis(constraints, parameters, covariates=()) -> HypothesisSpec:
    """Build a hypothesis from (expression, lower, upper) triples or
    ready-made constraint objects."""
    if isinstance(constraints, HypothesisSpec):
        return constraints
    out = []
    for item in constraints:
        if isinstance(item, (ExprConstraint, LinearConstraint)):
            out.append(item)
            continue
        text, lower, upper = item
        expr = text if isinstance(text, Expression) else parse_expression(
            text, parameters, covariates)
        lower = -math.inf if lower is None else float(lower)
        upper = math.inf if upper is None else float(upper)
        out.append(ExprConstraint(expr, lower, upper))
    return HypothesisSpec(tuple(out))


def _as_data(V, covariates) -> dict:
    if V is None:
        return {}
    if isinstance(V, dict):
        return {k: np.asarray(v, dtype=float) for k, v in V.items()}
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if covariates is None:
        covariates = [f"v{j + 1}" for j in range(V.shape[1])]
    if len(covariates) != V.shape[1]:
        raise ValueError("covariate names and matrix width disagree")
    return {name: V[:, j] for j, name in enumerate(covariates)}


def _resolve_noise(noise, Y, kappa, alpha):
    """Return (NoiseModel, effective_level, notes)."""
    notes = []
    if noise is None or noise == "unknown":
        if kappa is None:
            raise ValueError("unknown noise scale needs a kappa in (0, 1)")
        bound = sigma_upper_bound(Y, kappa)
        noise = NoiseModel.gaussian(max(bound.b_kappa, np.finfo(float).tiny))
        notes.append(
            f"sigma unknown: substituted the data-driven bound {bound.b_kappa:.6g} "
            f"(kappa={kappa}); the overall level is accounted conservatively as "
            f"alpha + kappa = {alpha + kappa:.6g}")
        notes.append(bound.note)
        return noise, alpha + kappa, notes
    if isinstance(noise, tuple):
        kind = noise[0]
        if kind == "gaussian":
            noise = NoiseModel.gaussian(noise[1])
        elif kind == "log_concave":
            noise = NoiseModel.log_concave(noise[1])
        elif kind == "bounded":
            noise = NoiseModel.bounded(noise[1], noise[2])
        else:
            raise ValueError(f"unknown noise kind {kind!r}")
    return noise, alpha, notes


def _threshold_for(method, X, q, noise, R, split, seed, stream_index):
    if method in ("union", "min") and not math.isinf(q):
        raise ValueError("union-bound thresholds are defined for q = inf only")
    if method == "concentration":
        return concentration_threshold(X, q, noise, R, split, seed, stream_index)
    if method == "union":
        return union_bound_threshold(X, noise.scale, split.total)
    if method == "min":
        conc = concentration_threshold(X, q, noise, R, split, seed, stream_index)
        union = union_bound_threshold(X, noise.scale, split.total)
        return min_threshold(conc, union)
    raise ValueError(f"unknown threshold method {method!r}")


def run_test(model, parameters, Y, hypothesis, instruments, V=None,
             covariates=None, q="inf", noise=None, alpha=0.05,
             alpha_split: AlphaSplit | None = None, R: int = 10000,
             seed: int = 0, method: str = "min",
             solver: SolverOptions | None = None, column_scale: str = "rms",
             kappa: float | None = None, stream_index: int = 0,
             bounds=None) -> TestReport:
    """Run the full test pipeline and return a :class:`TestReport`.

    ``model`` is an expression string, a parsed expression, or an (n, p)
    design matrix for linear models.  ``instruments`` follows
    :func:`build_instruments`.  ``method`` picks the critical value:
    ``concentration``, ``union``, or their pointwise ``min`` (q = inf).
    An empty constraint set is reported as its own verdict, not a rejection.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    if not np.all(np.isfinite(Y)):
        raise ValueError("responses contain non-finite values")
    n = Y.shape[0]
    q = parse_order(q)
    data = _as_data(V, covariates)
    for name, col in data.items():
        if col.shape != (n,):
            raise ValueError(f"covariate {name!r} must have length n = {n}")
        if not np.all(np.isfinite(col)):
            raise ValueError(f"covariate {name!r} contains non-finite values")

    if isinstance(model, str):
        model = parse_expression(model, parameters, tuple(data))
    hypothesis = make_hypothesis(hypothesis, parameters, tuple(data))

    X_raw = build_instruments(data, instruments, n)
    inst = normalize_columns(X_raw, scale=column_scale)

    if alpha_split is None:
        alpha_split = AlphaSplit.default(alpha)
    elif abs(alpha_split.total - alpha) > 1e-12:
        alpha = alpha_split.total
    noise, effective_level, notes = _resolve_noise(noise, Y, kappa, alpha)

    threshold = _threshold_for(method, inst.X, q, noise, R, alpha_split,
                               seed, stream_index)

    solver = solver if solver is not None else SolverOptions()
    if solver.stop_at_threshold:
        from dataclasses import replace as _replace
        solver = _replace(solver, stop_when_below=threshold.value)
    if bounds is not None:
        bounds = np.asarray(bounds, dtype=float)
        if bounds.shape == (2,):
            bounds = np.tile(bounds, (len(parameters), 1))
    prob = SlackProblem(model=model, param_names=tuple(parameters), Y=Y,
                        X=inst.X, q=q, r=threshold.value,
                        hypothesis=hypothesis, data=data, options=solver,
                        bounds=bounds)
    p = len(parameters)
    diagnostics = power_feasibility_check(p, n, hypothesis.m, inst.L, q)

    try:
        solution = minimize_slack(prob)
    except InfeasibleConstraintsError as err:
        notes.append(str(err))
        return TestReport(
            psi=math.nan, threshold=threshold, reject=False,
            decision="infeasible-constraints", theta=None, mu=math.nan,
            alpha=alpha, effective_level=effective_level, q=q, method=method,
            solution=None, diagnostics=diagnostics, seed=seed,
            stream_index=stream_index, noise=_noise_dict(noise),
            column_scale=column_scale, scales=inst.scales, notes=tuple(notes))

    reject = bool(solution.psi >= threshold.value)
    if solution.dispersion > 1e-3 * max(1.0, solution.psi):
        notes.append(
            f"multistart dispersion {solution.dispersion:.3g}: the global "
            "minimum may not have been found; a missed minimum can only "
            "inflate the statistic")
    return TestReport(
        psi=solution.psi, threshold=threshold, reject=reject,
        decision="reject" if reject else "fail-to-reject",
        theta=solution.theta, mu=solution.mu, alpha=alpha,
        effective_level=effective_level, q=q, method=method,
        solution=solution, diagnostics=diagnostics, seed=seed,
        stream_index=stream_index, noise=_noise_dict(noise),
        column_scale=column_scale, scales=inst.scales, notes=tuple(notes))


def _noise_dict(noise: NoiseModel) -> dict:
    out = {"kind": noise.kind}
    for k in ("sigma", "phi", "lower", "upper"):
        v = getattr(noise, k)
        if v is not None:
            out[k] = v
    return out


def confidence_region(report: TestReport) -> ConfidenceRegion:
    """Interval [mu, 2 r + mu] for the instrumented discrepancy norm.

    Its length 2 r does not depend on the data beyond the threshold; the
    lower endpoint is the optimal slack.
    """
    if report.decision == "infeasible-constraints":
        raise ValueError("no confidence region for an infeasible constraint set")
    r = report.threshold.value
    return ConfidenceRegion(lower=report.mu, upper=2.0 * r + report.mu,
                            level=1.0 - report.effective_level)


def bounded_response_test(model, parameters, Y, hypothesis, instruments,
                          V=None, covariates=None, q="inf",
                          split: AlphaSplit | None = None, alpha: float = 0.05,
                          R: int = 10000, seed: int = 0,
                          solver: SolverOptions | None = None,
                          column_scale: str = "rms",
                          stream_index: int = 0):
    """Test with responses in [0, 1] via the sign-symmetrized critical value.

    Returns ``(TestReport, ConfidenceRegion)``.  No noise law is assumed
    beyond a correctly specified conditional mean; binary responses are the
    canonical case.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    if np.any(Y < 0.0) or np.any(Y > 1.0):
        raise ValueError("responses must lie in [0, 1]; rescale them first")
    n = Y.shape[0]
    q = parse_order(q)
    data = _as_data(V, covariates)
    if isinstance(model, str):
        model = parse_expression(model, parameters, tuple(data))
    hypothesis = make_hypothesis(hypothesis, parameters, tuple(data))
    if split is None:
        split = AlphaSplit.default3(alpha)
    if split.a3 is None:
        raise ValueError("bounded-response test needs a three-way split")

    X_raw = build_instruments(data, instruments, n)
    inst = normalize_columns(X_raw, scale=column_scale)
    threshold = rademacher_threshold(inst.X, Y, R, split, seed, stream_index, q=q)

    solver = solver if solver is not None else SolverOptions()
    prob = SlackProblem(model=model, param_names=tuple(parameters), Y=Y,
                        X=inst.X, q=q, r=threshold.value,
                        hypothesis=hypothesis, data=data, options=solver)
    diagnostics = power_feasibility_check(len(parameters), n, hypothesis.m,
                                          inst.L, q)
    notes = []
    try:
        solution = minimize_slack(prob)
    except InfeasibleConstraintsError as err:
        notes.append(str(err))
        report = TestReport(
            psi=math.nan, threshold=threshold, reject=False,
            decision="infeasible-constraints", theta=None, mu=math.nan,
            alpha=split.total, effective_level=split.total, q=q,
            method="rademacher", solution=None, diagnostics=diagnostics,
            seed=seed, stream_index=stream_index,
            noise={"kind": "bounded_response"}, column_scale=column_scale,
            scales=inst.scales, notes=tuple(notes))
        return report, None
    reject = bool(solution.psi >= threshold.value)
    report = TestReport(
        psi=solution.psi, threshold=threshold, reject=reject,
        decision="reject" if reject else "fail-to-reject",
        theta=solution.theta, mu=solution.mu, alpha=split.total,
        effective_level=split.total, q=q, method="rademacher",
        solution=solution, diagnostics=diagnostics, seed=seed,
        stream_index=stream_index, noise={"kind": "bounded_response"},
        column_scale=column_scale, scales=inst.scales, notes=tuple(notes))
    return report, confidence_region(report)
