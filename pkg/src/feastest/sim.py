"""Monte-Carlo study harness: exponential-mean regression designs,
average-partial-effect hypotheses, and the five reporting metrics.

The data-generating model is

    Y_i = sum_l v_il a_l + gamma * exp(sum_l v_il t_l) + W_i,

with a fixed covariate design drawn once from an equicorrelated normal
distribution and frozen across repetitions.  The tested restrictions put the
average partial effect of each constrained covariate inside an interval.

Reported metrics per configuration: (i) the true average partial effects,
(ii) the mean realized separation at the solution, (iii) the mean full
confidence-interval length 2r, (iv) the empirical coverage of the
discrepancy interval, and (v) the empirical rejection rate.

Instrument columns are scaled to unit Euclidean length here: decisions and
coverage are invariant to column scale, and this is the scale in which the
reference magnitudes for (ii) and (iii) are quoted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from joblib import Parallel, delayed

from . import rng
from .expressions import parse_expression
from .inference import build_instruments, confidence_region, run_test
from .norms import lq_norm, normalize_columns, parse_order
from .slack import SolverOptions
from .thresholds import AlphaSplit, NoiseModel

__all__ = [
    "DESIGN_SEEDS",
    "StudyConfig",
    "RepRecord",
    "StudyResult",
    "generate_design",
    "model_expression",
    "ape",
    "ape_values",
    "simulate_study",
    "table1_configs",
    "table2_configs",
    "h0_configs",
    "write_table_csv",
]

# Seeds of record for the frozen covariate designs, keyed by (n, k).  Chosen
# once so that the bundled coefficient sets reproduce the reference average
# partial effects; regenerating with the same seed gives the same design
# bit for bit.
DESIGN_SEEDS = {
    (30, 1): 0,
    (90, 1): 0,
    (30, 15): 0,
    (90, 15): 0,
}


def generate_design(n: int, k: int, rho: float = 0.5, seed: int = 0) -> np.ndarray:
    """Draw the fixed n-by-k covariate design from N(0, Sigma) with unit
    variances and constant correlation ``rho``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    Sigma = np.full((k, k), rho)
    np.fill_diagonal(Sigma, 1.0)
    C = np.linalg.cholesky(Sigma)
    Z = rng.stream(seed, rng.DESIGN).standard_normal((n, k))
    return Z @ C.T


def model_expression(k: int):
    """Model text and symbol names for the k-covariate study model.

    Parameter order: a1..ak, g, t1..tk (p = 2k + 1).
    """
    covs = tuple(f"v{l}" for l in range(1, k + 1))
    params = tuple(f"a{l}" for l in range(1, k + 1)) + ("g",) + tuple(
        f"t{l}" for l in range(1, k + 1))
    lin = " + ".join(f"a{l}*v{l}" for l in range(1, k + 1))
    inner = " + ".join(f"t{l}*v{l}" for l in range(1, k + 1))
    text = f"{lin} + g*exp({inner})"
    return text, params, covs


def ape_constraint_expression(k: int, l: int) -> str:
    inner = " + ".join(f"t{j}*v{j}" for j in range(1, k + 1))
    return f"a{l} + g*t{l}*mean(exp({inner}))"


def _theta_vector(alpha_coefs, gamma, tau_coefs) -> np.ndarray:
    return np.concatenate([np.asarray(alpha_coefs, dtype=float), [float(gamma)],
                           np.asarray(tau_coefs, dtype=float)])


def ape(theta: np.ndarray, V: np.ndarray, l: int) -> float:
    """Average partial effect of covariate ``l`` (1-based) at ``theta``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.ndim == 1:
        V = V[:, None]
    k = V.shape[1]
    theta = np.asarray(theta, dtype=float)
    a = theta[:k]
    gamma = theta[k]
    t = theta[k + 1:]
    if not 1 <= l <= k:
        raise ValueError(f"covariate index {l} outside 1..{k}")
    s = float(np.mean(np.exp(V @ t)))
    return float(a[l - 1] + gamma * t[l - 1] * s)


def ape_values(theta: np.ndarray, V: np.ndarray, indices) -> np.ndarray:
    return np.array([ape(theta, V, l) for l in indices])


@dataclass
class StudyConfig:
    label: str
    n: int
    k: int
    alpha_coefs: tuple
    tau_coefs: tuple
    gamma: float = 1.0
    sigma: float = 0.5
    constrained: tuple = (1,)
    interval: tuple = (0.0, 0.8)
    instrument_powers: int = 4
    reps: int = 100
    R: int = 10000
    alpha_split: tuple = (0.049, 0.001)
    beta_split: tuple = (0.001, 0.049)
    q: object = "inf"
    method: str = "min"
    rho: float = 0.5
    design_seed: int | None = None
    seed: int = 20260810
    column_scale: str = "unit"
    solver_starts: int = 4
    solver_box: tuple = (-3.0, 3.0)
    # hard search region for the optimizer; power against a fixed reference
    # implementation depends on the search depth, so bundled configurations
    # pin it explicitly
    solver_bounds: tuple | None = None
    solver_maxiter: int = 400
    stop_at_threshold: bool = False

    def __post_init__(self):
        self.alpha_coefs = tuple(float(v) for v in np.atleast_1d(self.alpha_coefs))
        self.tau_coefs = tuple(float(v) for v in np.atleast_1d(self.tau_coefs))
        if len(self.alpha_coefs) != self.k or len(self.tau_coefs) != self.k:
            raise ValueError("coefficient lengths must equal k")
        self.constrained = tuple(int(l) for l in self.constrained)
        if not self.constrained:
            raise ValueError("at least one constrained covariate is required")
        if self.design_seed is None:
            self.design_seed = DESIGN_SEEDS.get((self.n, self.k), 0)
        if self.reps < 1:
            raise ValueError("reps must be at least 1")

    @property
    def p(self) -> int:
        return 2 * self.k + 1

    @property
    def L(self) -> int:
        return self.k * self.instrument_powers

    @property
    def theta_star(self) -> np.ndarray:
        return _theta_vector(self.alpha_coefs, self.gamma, self.tau_coefs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["q"] = "inf" if math.isinf(parse_order(self.q)) else parse_order(self.q)
        return out


@dataclass
class RepRecord:
    rep: int
    psi: float
    r: float
    two_r: float
    mu: float
    separation: float
    reject: bool
    covered: bool
    decision: str
    dispersion: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudyResult:
    config: StudyConfig
    ape_true: np.ndarray
    mean_separation: float
    mean_two_r: float
    coverage: float
    rejection: float
    records: list
    n_failures: int

    def table_row(self) -> dict:
        """One row in the layout of the study tables (metrics i..v)."""
        apes = np.asarray(self.ape_true)
        i_val = float(apes[0]) if np.allclose(apes, apes[0], atol=1e-9) else \
            "(" + ", ".join(f"{v:.3f}" for v in apes) + ")"
        return {
            "label": self.config.label,
            "n": self.config.n,
            "L": self.config.L,
            "i_true_ape": i_val,
            "ii_mean_separation": round(self.mean_separation, 6),
            "iii_mean_2r": round(self.mean_two_r, 6),
            "iv_coverage": round(self.coverage, 4),
            "v_rejection": round(self.rejection, 4),
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ape_true": [float(v) for v in self.ape_true],
            "mean_separation": self.mean_separation,
            "mean_two_r": self.mean_two_r,
            "coverage": self.coverage,
            "rejection": self.rejection,
            "n_failures": self.n_failures,
            "records": [r.to_dict() for r in self.records],
        }


class _StudyContext:
    """Per-configuration fixed state shared by every repetition."""

    def __init__(self, cfg: StudyConfig):
        self.cfg = cfg
        self.V = generate_design(cfg.n, cfg.k, cfg.rho, cfg.design_seed)
        self.data = {f"v{l}": self.V[:, l - 1] for l in range(1, cfg.k + 1)}
        text, params, covs = model_expression(cfg.k)
        self.model = parse_expression(text, params, covs)
        self.params = params
        self.hypothesis = [
            (ape_constraint_expression(cfg.k, l), cfg.interval[0], cfg.interval[1])
            for l in cfg.constrained
        ]
        X_raw = build_instruments(self.data, {"powers": cfg.instrument_powers}, cfg.n)
        self.inst = normalize_columns(X_raw, scale=cfg.column_scale)
        self.g_star = self.model.eval(dict(zip(params, cfg.theta_star)), self.data)
        self.ape_true = ape_values(cfg.theta_star, self.V, cfg.constrained)
        self.warm = self._warm_start()
        self.q = parse_order(cfg.q)

    def _warm_start(self) -> np.ndarray:
        """Project the data-generating parameters into the constraint set by
        shifting the linear coefficients of the constrained covariates."""
        cfg = self.cfg
        th = self.cfg.theta_star.copy()
        lo, hi = cfg.interval
        for l in cfg.constrained:
            val = ape(th, self.V, l)
            if val > hi:
                th[l - 1] += hi - val
            elif val < lo:
                th[l - 1] += lo - val
        if cfg.solver_bounds is not None:
            th = np.clip(th, cfg.solver_bounds[0], cfg.solver_bounds[1])
        return th

    def separation(self, theta_hat: np.ndarray) -> float:
        g_hat = self.model.eval(dict(zip(self.params, theta_hat)), self.data)
        dv = self.inst.X.T @ (self.g_star - g_hat) / self.cfg.n
        return lq_norm(dv, self.q)


def _run_rep(ctx: _StudyContext, rep: int):
    cfg = ctx.cfg
    W = rng.stream(cfg.seed, rng.NOISE, rep).standard_normal(cfg.n) * cfg.sigma
    Y = ctx.g_star + W
    solver = SolverOptions(backend="epigraph", starts=cfg.solver_starts,
                           box=cfg.solver_box, seed=cfg.seed,
                           warm_starts=(ctx.warm,), maxiter=cfg.solver_maxiter,
                           stop_at_threshold=cfg.stop_at_threshold)
    report = run_test(
        model=ctx.model, parameters=ctx.params, Y=Y, hypothesis=ctx.hypothesis,
        instruments=ctx.inst.X, V=ctx.data, q=cfg.q,
        noise=NoiseModel.gaussian(cfg.sigma),
        alpha_split=AlphaSplit(*cfg.alpha_split), R=cfg.R, seed=cfg.seed,
        method=cfg.method, solver=solver, column_scale=cfg.column_scale,
        stream_index=rep, bounds=cfg.solver_bounds)
    # the context instruments already carry the configured scale, so the
    # re-normalization inside run_test is a no-op and the report's X equals
    # ctx.inst.X
    r = report.threshold.value
    sep = ctx.separation(report.theta)
    ci = confidence_region(report)
    return RepRecord(
        rep=rep, psi=report.psi, r=r, two_r=2.0 * r, mu=report.mu,
        separation=sep, reject=report.reject,
        covered=bool(ci.lower <= sep <= ci.upper),
        decision=report.decision,
        dispersion=0.0 if report.solution is None else report.solution.dispersion)


def simulate_study(cfg: StudyConfig, n_jobs: int = 1, verbose: int = 0) -> StudyResult:
    """Run every repetition of one study configuration.

    Repetition ``rep`` owns the noise stream index ``rep`` and the
    Monte-Carlo stream index ``rep``; the result is therefore independent of
    ``n_jobs`` and identical across reruns.
    """
    ctx = _StudyContext(cfg)
    if n_jobs == 1:
        out = [_try_rep(ctx, rep) for rep in range(cfg.reps)]
    else:
        out = Parallel(n_jobs=n_jobs, verbose=verbose)(
            delayed(_try_rep)(ctx, rep) for rep in range(cfg.reps))
    records = [r for r in out if r is not None]
    n_failures = sum(1 for r in out if r is None)
    if not records:
        raise RuntimeError(f"every repetition failed for study {cfg.label!r}")
    return StudyResult(
        config=cfg,
        ape_true=ctx.ape_true,
        mean_separation=float(np.mean([r.separation for r in records])),
        mean_two_r=float(np.mean([r.two_r for r in records])),
        coverage=float(np.mean([r.covered for r in records])),
        rejection=float(np.mean([r.reject for r in records])),
        records=records,
        n_failures=n_failures,
    )


def _try_rep(ctx, rep):
    try:
        return _run_rep(ctx, rep)
    except Exception:
        return None


# ---------------------------------------------------------------------------
# Bundled configurations


def table1_configs(reps: int = 100, **overrides) -> list:
    """Low-dimensional study: k = 1, p = 3, one constrained covariate."""
    rows = [
        ("n30_L4", 30, 4, 0.657),
        ("n30_L3", 30, 3, 0.657),
        ("n90_L4", 90, 4, 0.533),
        ("n90_L3", 90, 3, 0.533),
    ]
    return [StudyConfig(label=f"table1_{label}", n=n, k=1,
                        alpha_coefs=(coef,), tau_coefs=(coef,),
                        instrument_powers=powers, reps=reps, **overrides)
            for label, n, powers, coef in rows]


def table2_configs(reps: int = 100, **overrides) -> list:
    """High-dimensional study: k = 15, p = 31, fifteen constrained covariates."""
    rows = [
        ("n30_L60", 30, 4, 0.194),
        ("n30_L45", 30, 3, 0.194),
        ("n90_L60", 90, 4, 0.172),
        ("n90_L45", 90, 3, 0.172),
    ]
    return [StudyConfig(label=f"table2_{label}", n=n, k=15,
                        alpha_coefs=(coef,) * 15, tau_coefs=(coef,) * 15,
                        constrained=tuple(range(1, 16)),
                        instrument_powers=powers, reps=reps,
                        solver_starts=overrides.pop("solver_starts", 3),
                        **overrides)
            for label, n, powers, coef in rows]


def h0_configs(reps: int = 100, **overrides) -> list:
    """Null-true configurations used for empirical size checks: a linear
    low-dimensional design, the nonlinear k = 1 model, and a non-sparse
    p = 31 model, all with true average partial effects inside the interval."""
    return [
        StudyConfig(label="h0_k1", n=30, k=1, alpha_coefs=(0.2,),
                    tau_coefs=(0.2,), reps=reps, **overrides),
        StudyConfig(label="h0_k1_n90", n=90, k=1, alpha_coefs=(0.3,),
                    tau_coefs=(0.1,), instrument_powers=3, reps=reps, **overrides),
        StudyConfig(label="h0_k15_nonsparse", n=30, k=15,
                    alpha_coefs=(0.05,) * 15, tau_coefs=(0.05,) * 15,
                    constrained=tuple(range(1, 16)), reps=reps,
                    solver_starts=overrides.pop("solver_starts", 3), **overrides),
    ]


def write_table_csv(results, path):
    """Emit the study table (one configuration per row) as CSV."""
    import csv

    rows = [r.table_row() for r in results]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
