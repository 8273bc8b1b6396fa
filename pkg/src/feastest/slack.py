"""Slack minimization over a constrained parameter set.

The program being solved is: make the instrumented moment norm
``psi(theta) = ||(1/n) sum_i X_i (Y_i - g(V_i; theta))||_q`` no larger than
``r + mu`` with the smallest nonnegative slack ``mu``, subject to
``h(theta) in Omega``.  For fixed theta the optimal slack is
``max(0, psi(theta) - r)``, so the solver minimizes ``psi`` over the
constraint set and recovers the slack afterwards; the rejection rule
``psi(theta_hat) >= r`` is unchanged by this reduction.

Backends:

* ``lp``       exact reformulation as a linear program (affine model and
               constraints, q in {1, inf}), solved by the dense simplex;
* ``epigraph`` smooth reformulation solved by SLSQP with exact forward-mode
               jacobians (q in {1, 2, inf});
* ``penalty``  exterior quadratic penalty plus Nelder-Mead local search,
               derivative free.

All backends run under a common seeded multistart driver with deterministic
tie-breaking, so results are reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from . import rng
from .expressions import Expression
from .norms import lq_norm, parse_order
from .simplex import StandardLp, lp_solve

__all__ = [
    "LinearConstraint",
    "ExprConstraint",
    "HypothesisSpec",
    "SolverOptions",
    "SlackProblem",
    "SlackSolution",
    "VectorSlackSolution",
    "SolverError",
    "InfeasibleConstraintsError",
    "ConvergenceError",
    "minimize_slack",
    "minimize_slack_vector",
    "vector_slack_from_moment",
]

_BIG = 1e12


class SolverError(Exception):
    pass


class InfeasibleConstraintsError(SolverError):
    """The hypothesis constraint set admits no feasible parameter vector."""


class ConvergenceError(SolverError):
    """No start converged; carries the best incumbent found, if any."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


# ---------------------------------------------------------------------------
# Constraints


@dataclass(frozen=True)
class LinearConstraint:
    """offset + weights @ theta restricted to [lower, upper]."""

    weights: np.ndarray
    offset: float
    lower: float
    upper: float

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.lower > self.upper:
            raise ValueError("constraint has lower > upper")


@dataclass(frozen=True)
class ExprConstraint:
    """A scalar expression over parameters (and data aggregates) in [lower, upper]."""

    expression: Expression
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("constraint has lower > upper")


@dataclass(frozen=True)
class HypothesisSpec:
    """The constraint set h(theta) in Omega, one interval per coordinate of h."""

    constraints: tuple

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if len(self.constraints) < 1:
            raise ValueError("hypothesis needs at least one constraint")

    @property
    def m(self) -> int:
        return len(self.constraints)


class _CompiledConstraint:
    def __init__(self, con, param_names, data):
        self.lower = con.lower
        self.upper = con.upper
        self._cache = (None, None, None)  # theta bytes, value, grad
        if isinstance(con, LinearConstraint):
            w = np.asarray(con.weights, dtype=float)
            if w.shape != (len(param_names),):
                raise ValueError("linear constraint weight length mismatch")
            self._value = lambda th: float(con.offset + w @ th)
            self._grad = lambda th: w
            self.affine = (con.offset, w)
        elif isinstance(con, ExprConstraint):
            expr = con.expression
            names = param_names

            def value(th, expr=expr, names=names, data=data):
                v = expr.eval(dict(zip(names, th)), data)
                if not np.isscalar(v):
                    raise SolverError(
                        "constraint expression is row dependent; aggregate with mean(...)")
                return float(v)

            def grad(th, expr=expr, names=names, data=data):
                g = expr.grad(dict(zip(names, th)), data, wrt=names)
                if g.ndim != 1:
                    raise SolverError(
                        "constraint expression is row dependent; aggregate with mean(...)")
                return g

            self._value = value
            self._grad = grad
            if expr.is_affine_in_params():
                u, w = expr.affine_parts(data, wrt=param_names)
                self.affine = (float(u), np.asarray(w, dtype=float))
            else:
                self.affine = None
        else:
            raise TypeError(f"unsupported constraint {con!r}")

    # optimizers evaluate value and gradient at the same point across many
    # callback objects; a one-slot cache removes the duplicate tree walks
    def value(self, th) -> float:
        key = th.tobytes()
        if self._cache[0] != key or self._cache[1] is None:
            self._cache = (key, self._value(th), self._cache[2] if self._cache[0] == key else None)
        return self._cache[1]

    def grad(self, th):
        key = th.tobytes()
        if self._cache[0] != key or self._cache[2] is None:
            g = self._grad(th)
            v = self._cache[1] if self._cache[0] == key else None
            self._cache = (key, v, g)
        return self._cache[2]

    def violation(self, th) -> float:
        v = self.value(th)
        return max(0.0, self.lower - v, v - self.upper)


# ---------------------------------------------------------------------------
# Model compilation


class _CompiledModel:
    """Row values and exact jacobian of g(V; theta) for numeric theta,
    with a one-slot cache keyed on theta."""

    def __init__(self, model, param_names, data, n):
        self.p = len(param_names)
        self.n = n
        self._cache = (None, None, None)
        if isinstance(model, Expression):
            names = tuple(param_names)

            def values(th):
                v = model.eval(dict(zip(names, th)), data)
                return np.full(n, v) if np.isscalar(v) else v

            def jacobian(th):
                J = model.grad(dict(zip(names, th)), data, wrt=names)
                return np.tile(J, (n, 1)) if J.ndim == 1 else J

            self._values = values
            self._jacobian = jacobian
            self.affine = None
            if model.is_affine_in_params():
                g0, G = model.affine_parts(data, wrt=names)
                g0 = np.full(n, g0) if np.isscalar(g0) else np.asarray(g0, dtype=float)
                G = np.tile(G, (n, 1)) if G.ndim == 1 else G
                self.affine = (g0, G)
        else:
            G = np.asarray(model, dtype=float)
            if G.shape != (n, self.p):
                raise ValueError("linear model matrix must be n x p")
            self._values = lambda th: G @ th
            self._jacobian = lambda th: G
            self.affine = (np.zeros(n), G)

    def values(self, th):
        key = th.tobytes()
        if self._cache[0] != key or self._cache[1] is None:
            v = self._values(th)
            J = self._cache[2] if self._cache[0] == key else None
            self._cache = (key, v, J)
        return self._cache[1]

    def jacobian(self, th):
        key = th.tobytes()
        if self._cache[0] != key or self._cache[2] is None:
            J = self._jacobian(th)
            v = self._cache[1] if self._cache[0] == key else None
            self._cache = (key, v, J)
        return self._cache[2]


# ---------------------------------------------------------------------------
# Problem and solution containers


@dataclass
class SolverOptions:
    backend: str = "auto"  # auto | lp | epigraph | penalty
    starts: int = 16
    box: tuple = (-10.0, 10.0)
    seed: int = 0
    warm_starts: tuple = ()
    feas_tol: float | None = None
    stop_when_below: float | None = None
    # decision-only shortcut: once any start is feasible with psi below the
    # critical value the verdict cannot change, so remaining starts may be
    # skipped (set by callers that only need the decision)
    stop_at_threshold: bool = False
    maxiter: int = 400
    penalty_init: float = 10.0
    penalty_max: float = 1e8


@dataclass
class SlackProblem:
    """Data, instruments, threshold, and constraints for one solve.

    ``model`` is either an :class:`~feastest.expressions.Expression` over the
    parameters/covariates or an ``(n, p)`` design matrix for a linear model;
    ``data`` maps covariate names to columns when the model is an expression.
    ``bounds`` are optional per-parameter (lower, upper) pairs enforced as
    hard constraints (used e.g. for nonnegative decision variables).
    """

    model: object
    param_names: tuple
    Y: np.ndarray
    X: np.ndarray
    q: object
    r: float
    hypothesis: HypothesisSpec
    data: dict | None = None
    bounds: np.ndarray | None = None
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("instruments and responses disagree on n")
        if self.r < 0:
            raise ValueError("threshold r must be nonnegative")
        self.q = parse_order(self.q)
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=float)
            if self.bounds.shape != (len(self.param_names), 2):
                raise ValueError("bounds must be (p, 2)")


@dataclass
class SlackSolution:
    theta: np.ndarray
    mu: float
    psi: float
    backend: str
    dispersion: float
    residual: float
    n_starts: int
    converged: bool
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "theta": [float(t) for t in self.theta],
            "mu": self.mu,
            "psi": self.psi,
            "backend": self.backend,
            "dispersion": self.dispersion,
            "residual": self.residual,
            "n_starts": self.n_starts,
            "converged": self.converged,
            "message": self.message,
        }


@dataclass
class VectorSlackSolution:
    theta: np.ndarray
    mu: np.ndarray
    mu_norm: float
    psi: float
    q_tilde: float
    backend: str


# ---------------------------------------------------------------------------
# Shared machinery


class _Workspace:
    def __init__(self, prob: SlackProblem):
        self.prob = prob
        self.n = prob.Y.shape[0]
        self.L = prob.X.shape[1]
        self.p = len(prob.param_names)
        self.model = _CompiledModel(prob.model, prob.param_names, prob.data, self.n)
        self.cons = [_CompiledConstraint(c, tuple(prob.param_names), prob.data)
                     for c in prob.hypothesis.constraints]
        self.Xn = prob.X / self.n

    def moment(self, th):
        return self.Xn.T @ (self.prob.Y - self.model.values(th))

    def moment_jac(self, th):
        return -self.Xn.T @ self.model.jacobian(th)

    def psi(self, th):
        return lq_norm(self.moment(th), self.prob.q)

    def residual(self, th):
        worst = 0.0
        for c in self.cons:
            worst = max(worst, c.violation(th))
        if self.prob.bounds is not None:
            lo = self.prob.bounds[:, 0]
            hi = self.prob.bounds[:, 1]
            worst = max(worst, float(np.max(np.maximum(lo - th, 0.0), initial=0.0)))
            worst = max(worst, float(np.max(np.maximum(th - hi, 0.0), initial=0.0)))
        return worst

    def fully_affine(self):
        return (self.model.affine is not None
                and all(c.affine is not None for c in self.cons))

    def starts(self):
        opts = self.prob.options
        pts = [np.asarray(w, dtype=float) for w in opts.warm_starts]
        lo, hi = opts.box
        for i in range(opts.starts):
            gen = rng.stream(opts.seed, rng.MULTISTART, i)
            pt = gen.uniform(lo, hi, size=self.p)
            if self.prob.bounds is not None:
                pt = np.clip(pt, self.prob.bounds[:, 0], self.prob.bounds[:, 1])
            pts.append(pt)
        return pts


def _sanitize(a):
    return np.nan_to_num(a, nan=_BIG, posinf=_BIG, neginf=-_BIG)


def _multistart(ws: _Workspace, local, backend: str) -> SlackSolution:
    opts = ws.prob.options
    feas_tol = opts.feas_tol if opts.feas_tol is not None else 1e-6
    best = None
    psis = []
    n_run = 0
    for th0 in ws.starts():
        n_run += 1
        try:
            th = local(th0)
        except (FloatingPointError, SolverError, ValueError):
            continue
        if th is None or not np.all(np.isfinite(th)):
            continue
        res = ws.residual(th)
        if res > feas_tol:
            continue
        psi = ws.psi(th)
        psis.append(psi)
        if best is None or psi < best[1] - 1e-15:
            best = (th, psi, res)
        if opts.stop_when_below is not None and best[1] < opts.stop_when_below:
            break
    if best is None:
        _diagnose_infeasible(ws, feas_tol)
        raise ConvergenceError(
            f"no {backend} start produced a feasible point within tolerance {feas_tol}")
    th, psi, res = best
    return SlackSolution(
        theta=th,
        mu=max(0.0, psi - ws.prob.r),
        psi=psi,
        backend=backend,
        dispersion=float(max(psis) - min(psis)) if len(psis) > 1 else 0.0,
        residual=res,
        n_starts=n_run,
        converged=True,
    )


def _diagnose_infeasible(ws: _Workspace, feas_tol: float):
    """Minimize total constraint violation; raise if the set looks empty."""

    def total_violation(th):
        v = 0.0
        for c in ws.cons:
            v += c.violation(th) ** 2
        if ws.prob.bounds is not None:
            v += float(np.sum(np.maximum(ws.prob.bounds[:, 0] - th, 0.0) ** 2))
            v += float(np.sum(np.maximum(th - ws.prob.bounds[:, 1], 0.0) ** 2))
        return v

    best = math.inf
    for th0 in ws.starts()[:max(4, min(8, ws.prob.options.starts))]:
        try:
            res = _scipy_minimize(total_violation, th0, method="Nelder-Mead",
                                  options={"maxiter": 400 * ws.p, "xatol": 1e-10,
                                           "fatol": 1e-14})
            best = min(best, float(res.fun))
        except ValueError:
            continue
    if best > feas_tol ** 2:
        raise InfeasibleConstraintsError(
            "constraint set appears empty: no feasible parameter vector found "
            f"(smallest violation {math.sqrt(max(best, 0.0)):.3g})")


# ---------------------------------------------------------------------------
# LP backend


class _LpBuilder:
    """Accumulates rows over design variables with bounds, then emits a
    standard-form LP (free variables split, shifted lower bounds)."""

    def __init__(self, nvars, lo, hi):
        self.nvars = nvars
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.rows_ub = []  # (a, b): a @ z <= b
        self.rows_eq = []  # (a, b): a @ z == b
        self.cost = np.zeros(nvars)

    def leq(self, a, b):
        self.rows_ub.append((np.asarray(a, dtype=float), float(b)))

    def eq(self, a, b):
        self.rows_eq.append((np.asarray(a, dtype=float), float(b)))

    def interval(self, a, offset, lower, upper):
        if lower == upper:
            self.eq(a, lower - offset)
            return
        if np.isfinite(upper):
            self.leq(a, upper - offset)
        if np.isfinite(lower):
            self.leq(-a, offset - lower)

    def build(self):
        # map each design variable to standard-form columns
        cols = []  # list of (col index in x, sign, shift) contributions
        col_count = 0
        mapping = []
        extra_rows = []
        for i in range(self.nvars):
            lo, hi = self.lo[i], self.hi[i]
            if not np.isfinite(lo) and not np.isfinite(hi):
                mapping.append(("free", col_count, col_count + 1))
                col_count += 2
            elif np.isfinite(lo):
                mapping.append(("lb", col_count, lo))
                col_count += 1
                if np.isfinite(hi):
                    extra_rows.append((i, hi - lo))  # z_i - lo <= hi - lo
            else:  # only upper bound
                mapping.append(("ub", col_count, hi))
                col_count += 1

        n_ub = len(self.rows_ub) + len(extra_rows)
        n_eq = len(self.rows_eq)
        ncols = col_count + n_ub
        A = np.zeros((n_ub + n_eq, ncols))
        b = np.zeros(n_ub + n_eq)
        c = np.zeros(ncols)

        def emit(row_idx, a, rhs):
            shift = rhs
            for i in range(self.nvars):
                kind = mapping[i]
                ai = a[i]
                if ai == 0.0:
                    continue
                if kind[0] == "free":
                    A[row_idx, kind[1]] += ai
                    A[row_idx, kind[2]] -= ai
                elif kind[0] == "lb":
                    A[row_idx, kind[1]] += ai
                    shift -= ai * kind[2]
                else:  # ub: z = hi - x
                    A[row_idx, kind[1]] -= ai
                    shift -= ai * kind[2]
            b[row_idx] = shift

        r = 0
        for a, rhs in self.rows_ub:
            emit(r, a, rhs)
            A[r, col_count + r] = 1.0  # slack
            r += 1
        for i, width in extra_rows:
            a = np.zeros(self.nvars)
            a[i] = 1.0
            emit(r, a, width + self.lo[i])
            A[r, col_count + r] = 1.0
            r += 1
        for a, rhs in self.rows_eq:
            emit(r, a, rhs)
            r += 1

        for i in range(self.nvars):
            kind = mapping[i]
            if kind[0] == "free":
                c[kind[1]] += self.cost[i]
                c[kind[2]] -= self.cost[i]
            elif kind[0] == "lb":
                c[kind[1]] += self.cost[i]
            else:
                c[kind[1]] -= self.cost[i]
        self._mapping = mapping
        return StandardLp(A=A, b=b, c=c)

    def recover(self, x):
        z = np.zeros(self.nvars)
        for i, kind in enumerate(self._mapping):
            if kind[0] == "free":
                z[i] = x[kind[1]] - x[kind[2]]
            elif kind[0] == "lb":
                z[i] = kind[2] + x[kind[1]]
            else:
                z[i] = kind[2] - x[kind[1]]
        return z


def _solve_lp_backend(ws: _Workspace) -> SlackSolution:
    prob = ws.prob
    q = prob.q
    if not (q == 1.0 or math.isinf(q)):
        raise SolverError("lp backend supports q in {1, inf} only")
    if not ws.fully_affine():
        raise SolverError("lp backend requires an affine model and affine constraints")
    g0, G = ws.model.affine
    cvec = ws.Xn.T @ (prob.Y - g0)
    M = ws.Xn.T @ G
    p = ws.p
    n_t = 1 if math.isinf(q) else ws.L
    nvars = p + n_t
    lo = np.full(nvars, -np.inf)
    hi = np.full(nvars, np.inf)
    if prob.bounds is not None:
        lo[:p] = prob.bounds[:, 0]
        hi[:p] = prob.bounds[:, 1]
    lo[p:] = 0.0
    builder = _LpBuilder(nvars, lo, hi)
    for j in range(ws.L):
        tcol = p if math.isinf(q) else p + j
        a = np.zeros(nvars)
        a[:p] = -M[j]
        a[tcol] = -1.0
        builder.leq(a, -cvec[j])  # c_j - M_j theta <= t
        a2 = np.zeros(nvars)
        a2[:p] = M[j]
        a2[tcol] = -1.0
        builder.leq(a2, cvec[j])  # M_j theta - c_j <= t
    for c in ws.cons:
        u, w = c.affine
        a = np.zeros(nvars)
        a[:p] = w
        builder.interval(a, u, c.lower, c.upper)
    builder.cost[p:] = 1.0
    lp = builder.build()
    res = lp_solve(lp, tol=1e-10)
    if res.status == "infeasible":
        raise InfeasibleConstraintsError(
            "constraint set is infeasible (simplex phase-1 certificate)")
    if res.status != "optimal":
        raise SolverError(f"unexpected LP status {res.status!r}")
    z = builder.recover(res.x)
    th = z[:p]
    psi = ws.psi(th)
    feas_tol = prob.options.feas_tol if prob.options.feas_tol is not None else 1e-8
    return SlackSolution(
        theta=th,
        mu=max(0.0, psi - prob.r),
        psi=psi,
        backend="lp",
        dispersion=0.0,
        residual=ws.residual(th),
        n_starts=1,
        converged=ws.residual(th) <= feas_tol,
    )


# ---------------------------------------------------------------------------
# Epigraph (SLSQP) backend


def _slsqp_constraints(ws: _Workspace, nz, theta_of):
    cons = []
    for c in ws.cons:
        if c.lower == c.upper:
            cons.append({
                "type": "eq",
                "fun": (lambda z, c=c: _sanitize(c.value(theta_of(z)) - c.lower)),
                "jac": (lambda z, c=c: _pad(_sanitize(c.grad(theta_of(z))), nz)),
            })
        else:
            if np.isfinite(c.upper):
                cons.append({
                    "type": "ineq",
                    "fun": (lambda z, c=c: _sanitize(c.upper - c.value(theta_of(z)))),
                    "jac": (lambda z, c=c: _pad(-_sanitize(c.grad(theta_of(z))), nz)),
                })
            if np.isfinite(c.lower):
                cons.append({
                    "type": "ineq",
                    "fun": (lambda z, c=c: _sanitize(c.value(theta_of(z)) - c.lower)),
                    "jac": (lambda z, c=c: _pad(_sanitize(c.grad(theta_of(z))), nz)),
                })
    return cons


def _pad(g, nz):
    out = np.zeros(nz)
    out[:g.shape[0]] = g
    return out


def _solve_epigraph_backend(ws: _Workspace) -> SlackSolution:
    prob = ws.prob
    q = prob.q
    if not (q in (1.0, 2.0) or math.isinf(q)):
        raise SolverError("epigraph backend supports q in {1, 2, inf}")
    p = ws.p
    maxiter = prob.options.maxiter

    theta_bounds = ([(None, None)] * p if prob.bounds is None else
                    [(None if not np.isfinite(l) else l,
                      None if not np.isfinite(u) else u)
                     for l, u in ws.prob.bounds])

    if q == 2.0:
        nz = p

        def fun(z):
            m = _sanitize(ws.moment(z))
            return float(m @ m)

        def jac(z):
            m = _sanitize(ws.moment(z))
            J = _sanitize(ws.moment_jac(z))
            return 2.0 * (m @ J)

        cons = _slsqp_constraints(ws, nz, lambda z: z)
        bounds = theta_bounds

        def local(th0):
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                res = _scipy_minimize(fun, th0, jac=jac, method="SLSQP",
                                      bounds=bounds, constraints=cons,
                                      options={"maxiter": maxiter, "ftol": 1e-12})
            return res.x if res.x is not None else None

        return _multistart(ws, local, "epigraph")

    n_t = 1 if math.isinf(q) else ws.L
    nz = p + n_t
    theta_of = lambda z: z[:p]

    def mom_rows(z):
        m = _sanitize(ws.moment(z[:p]))
        t = z[p] if math.isinf(q) else z[p:]
        return np.concatenate([t - m, t + m])

    def mom_jac(z):
        J = _sanitize(ws.moment_jac(z[:p]))
        L = ws.L
        out = np.zeros((2 * L, nz))
        out[:L, :p] = -J
        out[L:, :p] = J
        if math.isinf(q):
            out[:, p] = 1.0
        else:
            for j in range(L):
                out[j, p + j] = 1.0
                out[L + j, p + j] = 1.0
        return out

    cons = [{"type": "ineq", "fun": mom_rows, "jac": mom_jac}]
    cons += _slsqp_constraints(ws, nz, theta_of)
    bounds = theta_bounds + [(0.0, None)] * n_t
    cost = np.zeros(nz)
    cost[p:] = 1.0

    def fun(z):
        return float(cost @ z)

    def jac(z):
        return cost

    def local(th0):
        m0 = np.abs(_sanitize(ws.moment(th0)))
        t0 = np.array([m0.max()]) if math.isinf(q) else m0
        z0 = np.concatenate([th0, t0 + 1e-12])
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = _scipy_minimize(fun, z0, jac=jac, method="SLSQP",
                                  bounds=bounds, constraints=cons,
                                  options={"maxiter": maxiter, "ftol": 1e-12})
        return res.x[:p] if res.x is not None else None

    return _multistart(ws, local, "epigraph")


# ---------------------------------------------------------------------------
# Penalty (derivative-free) backend


def _solve_penalty_backend(ws: _Workspace) -> SlackSolution:
    prob = ws.prob
    opts = prob.options
    feas_tol = opts.feas_tol if opts.feas_tol is not None else 1e-6

    def penalized(th, rho):
        v = 0.0
        for c in ws.cons:
            v += c.violation(th) ** 2
        if prob.bounds is not None:
            v += float(np.sum(np.maximum(prob.bounds[:, 0] - th, 0.0) ** 2))
            v += float(np.sum(np.maximum(th - prob.bounds[:, 1], 0.0) ** 2))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            psi = ws.psi(th)
        if not math.isfinite(psi):
            psi = _BIG
        return psi + rho * v

    def local(th0):
        th = th0
        rho = opts.penalty_init
        while True:
            res = _scipy_minimize(lambda t: penalized(t, rho), th,
                                  method="Nelder-Mead",
                                  options={"maxiter": opts.maxiter * max(ws.p, 2),
                                           "xatol": 1e-9, "fatol": 1e-12})
            th = res.x
            if ws.residual(th) <= feas_tol:
                return th
            rho *= 10.0
            if rho > opts.penalty_max:
                return th  # multistart filters infeasible results

    return _multistart(ws, local, "penalty")


# ---------------------------------------------------------------------------
# Public entry points


def minimize_slack(prob: SlackProblem) -> SlackSolution:
    """Solve the slack-minimization program; see the module docstring.

    Raises :class:`InfeasibleConstraintsError` when the constraint set is
    empty and :class:`ConvergenceError` (carrying the best incumbent) when
    no start reaches feasibility.
    """
    ws = _Workspace(prob)
    backend = prob.options.backend
    if backend == "auto":
        if ws.fully_affine() and (prob.q == 1.0 or math.isinf(prob.q)):
            backend = "lp"
        elif prob.q in (1.0, 2.0) or math.isinf(prob.q):
            backend = "epigraph"
        else:
            backend = "penalty"
    if backend == "lp":
        return _solve_lp_backend(ws)
    if backend == "epigraph":
        return _solve_epigraph_backend(ws)
    if backend == "penalty":
        return _solve_penalty_backend(ws)
    raise ValueError(f"unknown backend {backend!r}")


def vector_slack_from_moment(m, r, q, q_tilde) -> np.ndarray:
    """Optimal slack vector for a fixed moment vector.

    For q = inf the solution is the coordinatewise soft threshold
    ``mu_j = sign(m_j) max(0, |m_j| - r)`` (optimal for every monotone
    q-tilde norm); for q = q-tilde it shrinks along m so that
    ``||mu||_q = max(0, ||m||_q - r)``.
    """
    m = np.asarray(m, dtype=float)
    q = parse_order(q)
    q_tilde = parse_order(q_tilde)
    if math.isinf(q):
        return np.sign(m) * np.maximum(np.abs(m) - r, 0.0)
    if q == q_tilde:
        nm = lq_norm(m, q)
        if nm <= r:
            return np.zeros_like(m)
        return m * (1.0 - r / nm)
    raise SolverError(f"unsupported norm pair (q={q}, q_tilde={q_tilde})")


def minimize_slack_vector(prob: SlackProblem, q_tilde) -> VectorSlackSolution:
    """Vector-slack variant: minimize ||mu||_q_tilde subject to the moment
    vector staying within q-norm distance r of mu and h(theta) in Omega.

    Supported pairs: outer q = inf with q_tilde in {1, 2, inf}, or
    q_tilde = q.  The returned theta is feasible for the scalar program
    with slack ||mu||_q.
    """
    q_tilde = parse_order(q_tilde)
    q = parse_order(prob.q)
    if q == q_tilde or not math.isinf(q):
        if q != q_tilde:
            raise SolverError(f"unsupported norm pair (q={q}, q_tilde={q_tilde})")
        sol = minimize_slack(prob)
        mu = vector_slack_from_moment(_Workspace(prob).moment(sol.theta), prob.r, q, q_tilde)
        return VectorSlackSolution(theta=sol.theta, mu=mu, mu_norm=lq_norm(mu, q_tilde),
                                   psi=sol.psi, q_tilde=q_tilde, backend=sol.backend)
    if q_tilde not in (1.0, 2.0) and not math.isinf(q_tilde):
        raise SolverError(f"unsupported norm pair (q={q}, q_tilde={q_tilde})")

    # outer q = inf: minimize over theta the exact inner solution
    ws = _Workspace(prob)

    def objective(th):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            mu = vector_slack_from_moment(ws.moment(th), prob.r, q, q_tilde)
        v = lq_norm(_sanitize(mu), q_tilde)
        return v if math.isfinite(v) else _BIG

    feas_tol = prob.options.feas_tol if prob.options.feas_tol is not None else 1e-6

    def local(th0):
        th = th0
        rho = prob.options.penalty_init
        while True:
            def pen(t):
                v = objective(t)
                for c in ws.cons:
                    v += rho * c.violation(t) ** 2
                if prob.bounds is not None:
                    v += rho * float(np.sum(np.maximum(prob.bounds[:, 0] - t, 0.0) ** 2))
                    v += rho * float(np.sum(np.maximum(t - prob.bounds[:, 1], 0.0) ** 2))
                return v

            res = _scipy_minimize(pen, th, method="Nelder-Mead",
                                  options={"maxiter": prob.options.maxiter * max(ws.p, 2),
                                           "xatol": 1e-9, "fatol": 1e-12})
            th = res.x
            if ws.residual(th) <= feas_tol:
                return th
            rho *= 10.0
            if rho > prob.options.penalty_max:
                return th

    opts = prob.options
    best = None
    for th0 in ws.starts():
        try:
            th = local(th0)
        except (SolverError, ValueError):
            continue
        if ws.residual(th) > feas_tol:
            continue
        val = objective(th)
        if best is None or val < best[1] - 1e-15:
            best = (th, val)
    if best is None:
        _diagnose_infeasible(ws, feas_tol)
        raise ConvergenceError("no start produced a feasible point")
    th = best[0]
    mu = vector_slack_from_moment(ws.moment(th), prob.r, q, q_tilde)
    return VectorSlackSolution(theta=th, mu=mu, mu_norm=lq_norm(mu, q_tilde),
                               psi=ws.psi(th), q_tilde=q_tilde, backend="penalty")
