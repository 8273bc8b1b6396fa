"""Critical values, deviation terms, separation bounds, and expectation
brackets for the instrumented moment norm.

All quantities are finite-sample: a threshold is a Monte-Carlo estimate of
the expected noise-moment norm plus explicit Gaussian-Lipschitz deviation
terms, an infinity-norm union-bound tail, or a symmetrized (sign-flip)
estimate for bounded responses.  Every threshold records its decomposition
so reports can be audited term by term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .norms import column_norm_functional, column_rms, lq_norm_rows, parse_order
from .stats import chi_mean_factor, inverse_normal_cdf

__all__ = [
    "NoiseModel",
    "AlphaSplit",
    "Threshold",
    "SeparationBound",
    "SigmaBound",
    "tau",
    "mc_gaussian_expectation",
    "concentration_threshold",
    "union_bound_threshold",
    "min_threshold",
    "ideal_threshold",
    "separation_delta",
    "rademacher_threshold",
    "sigma_upper_bound",
    "gaussian_max_lower",
    "gaussian_max_upper",
    "gaussian_max_bounds",
]

# Monte-Carlo draws are generated in fixed-size row blocks so that memory
# stays bounded while the produced stream (and hence every threshold)
# depends only on (seed, stream, index).
_MC_BLOCK = 8192


@dataclass(frozen=True)
class NoiseModel:
    """Noise class driving the deviation terms.

    gaussian   : W_i ~ N(0, sigma^2), deviation scale sigma.
    log_concave: density exp(-psi) with strong convexity parameter phi,
                 deviation scale 1/sqrt(phi).
    bounded    : independent W_i supported on [lower, upper], deviation
                 scale upper - lower.
    """

    kind: str
    sigma: float | None = None
    phi: float | None = None
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        if self.kind == "gaussian":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("gaussian noise requires sigma > 0")
        elif self.kind == "log_concave":
            if self.phi is None or self.phi <= 0:
                raise ValueError("log-concave noise requires phi > 0")
        elif self.kind == "bounded":
            if self.lower is None or self.upper is None or not self.upper > self.lower:
                raise ValueError("bounded noise requires lower < upper")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def gaussian(cls, sigma: float) -> "NoiseModel":
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def log_concave(cls, phi: float) -> "NoiseModel":
        return cls("log_concave", phi=float(phi))

    @classmethod
    def bounded(cls, lower: float, upper: float) -> "NoiseModel":
        return cls("bounded", lower=float(lower), upper=float(upper))

    @property
    def scale(self) -> float:
        """Scale entering every deviation term for this class."""
        if self.kind == "gaussian":
            return self.sigma
        if self.kind == "log_concave":
            return 1.0 / math.sqrt(self.phi)
        return self.upper - self.lower


@dataclass(frozen=True)
class AlphaSplit:
    """Additive split of an error budget across deviation terms."""

    a1: float
    a2: float
    a3: float | None = None

    def __post_init__(self):
        parts = self.parts
        if any(p <= 0 for p in parts):
            raise ValueError("split components must be positive")
        if not 0.0 < sum(parts) < 1.0:
            raise ValueError("split must sum to a level in (0, 1)")

    @property
    def parts(self) -> tuple:
        return (self.a1, self.a2) if self.a3 is None else (self.a1, self.a2, self.a3)

    @property
    def total(self) -> float:
        return float(sum(self.parts))

    @classmethod
    def default(cls, alpha: float) -> "AlphaSplit":
        # weight the non-averaged deviation heavily; the second term shrinks
        # with 1/sqrt(R) anyway
        return cls(0.98 * alpha, 0.02 * alpha)

    @classmethod
    def default3(cls, alpha: float) -> "AlphaSplit":
        return cls(0.8 * alpha, 0.1 * alpha, 0.1 * alpha)


@dataclass(frozen=True)
class Threshold:
    """A critical value together with its audited decomposition.

    ``value = mc_mean + sum(v for _, v in tau_terms)`` always holds (the
    recorded tau terms already include their 1/sqrt(R) style weights).
    """

    value: float
    method: str  # concentration | union_bound | min_of_both | ideal | rademacher
    level: float
    mc_mean: float = 0.0
    mc_std_error: float = 0.0
    tau_terms: tuple = ()
    R: int = 0
    seed: int | None = None
    colnorm: float = 0.0
    components: dict = field(default_factory=dict)
    note: str = ""

    def recompute(self) -> float:
        return self.mc_mean + sum(v for _, v in self.tau_terms)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "level": self.level,
            "mc_mean": self.mc_mean,
            "mc_std_error": self.mc_std_error,
            "tau_terms": {k: v for k, v in self.tau_terms},
            "R": self.R,
            "seed": self.seed,
            "colnorm": self.colnorm,
            "components": dict(self.components),
            "note": self.note,
        }


@dataclass(frozen=True)
class SeparationBound:
    """Required separation for power control at level beta."""

    value: float
    method: str
    alpha: float
    beta: float
    concentration: float
    union: float | None = None

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "alpha": self.alpha,
            "beta": self.beta,
            "concentration": self.concentration,
            "union": self.union,
        }


def tau(noise: NoiseModel, colnorm: float, n: int, level: float) -> float:
    """Deviation term ``scale * colnorm * sqrt((2/n) log(1/level))``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if colnorm <= 0:
        raise ValueError("column norm functional must be positive")
    if not 0.0 < level <= 1.0:
        raise ValueError(f"deviation level must lie in (0, 1], got {level}")
    return noise.scale * colnorm * math.sqrt((2.0 / n) * math.log(1.0 / level))


def _mc_norm_values(X: np.ndarray, q, sigma: float, R: int, seed: int,
                    stream_index: int, zeta=None) -> np.ndarray:
    """sigma * zeta((1/n) X^T Z_r) for R independent standard normal Z_r."""
    n = X.shape[0]
    gen = rng.stream(seed, rng.MC_GAUSSIAN, stream_index)
    vals = np.empty(R)
    done = 0
    while done < R:
        block = min(_MC_BLOCK, R - done)
        Z = gen.standard_normal((block, n))
        M = (Z @ X) / n
        if zeta is None:
            vals[done:done + block] = lq_norm_rows(M, q)
        else:
            vals[done:done + block] = [float(zeta(row)) for row in M]
        done += block
    return sigma * vals


def mc_gaussian_expectation(X, q, sigma: float, R: int, seed: int,
                            stream_index: int = 0, zeta=None):
    """Monte-Carlo estimate of the expected noise-moment norm.

    Returns ``(mean, std_error)`` of ``(sigma/R) sum_r zeta((1/n) X^T Z_r)``
    over R seeded standard normal draws; deterministic given
    (seed, stream_index, R, X).
    """
    X = _matrix(X)
    if R < 1:
        raise ValueError("R must be at least 1")
    if sigma == 0.0:
        return 0.0, 0.0
    vals = _mc_norm_values(X, q, sigma, R, seed, stream_index, zeta=zeta)
    se = float(vals.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return float(vals.mean()), se


def concentration_threshold(X, q, noise: NoiseModel, R: int, split: AlphaSplit,
                            seed: int, stream_index: int = 0, expectation=None,
                            zeta=None) -> Threshold:
    """Monte-Carlo-plus-deviation critical value at level split.total.

    ``value = mc_mean + tau(split.a1) + sqrt(1/R) * tau(split.a2)``.

    The Monte-Carlo mean uses standard normal draws scaled by the noise
    class deviation scale.  For non-Gaussian classes that surrogate has no
    finite-sample guarantee of its own (the deviation terms do); callers
    holding a better estimate of the expected moment norm can pass it as
    ``expectation``.
    """
    X = _matrix(X)
    if split.a3 is not None:
        raise ValueError("concentration threshold uses a two-way split")
    q = parse_order(q)
    n = X.shape[0]
    colnorm = column_norm_functional(X, q)
    note = ""
    if expectation is not None:
        mc_mean, mc_se = float(expectation), 0.0
        note = "expectation term supplied by caller"
    else:
        mc_mean, mc_se = mc_gaussian_expectation(X, q, noise.scale, R, seed,
                                                 stream_index, zeta=zeta)
        if noise.kind != "gaussian":
            note = ("expectation term is a scaled standard-normal surrogate; "
                    "supply one for the actual noise law if available")
    t1 = tau(noise, colnorm, n, split.a1)
    t2 = math.sqrt(1.0 / R) * tau(noise, colnorm, n, split.a2)
    return Threshold(
        value=mc_mean + t1 + t2,
        method="concentration",
        level=split.total,
        mc_mean=mc_mean,
        mc_std_error=mc_se,
        tau_terms=(("tau_a1", t1), ("tau_a2_over_sqrtR", t2)),
        R=R,
        seed=seed,
        colnorm=colnorm,
        note=note,
    )


def union_bound_threshold(X, sigma: float, alpha: float) -> Threshold:
    """Per-coordinate Gaussian tail bound for the max norm.

    ``sqrt(max_j (2 sigma^2 / n) sum_i X_ij^2) * sqrt((1/n) log(2L/alpha))``;
    ignores dependence across instrument columns.
    """
    X = _matrix(X)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    n, L = X.shape
    lead = math.sqrt((2.0 * sigma ** 2 / n) * float(np.max(np.sum(X * X, axis=0))))
    value = lead * math.sqrt(math.log(2.0 * L / alpha) / n)
    return Threshold(
        value=value,
        method="union_bound",
        level=alpha,
        tau_terms=(("union_tail", value),),
        colnorm=column_norm_functional(X, math.inf),
    )


def min_threshold(concentration: Threshold, union: Threshold) -> Threshold:
    """The smaller of the two q = inf critical values, keeping both on record."""
    chosen = concentration if concentration.value <= union.value else union
    return Threshold(
        value=chosen.value,
        method="min_of_both",
        level=max(concentration.level, union.level),
        mc_mean=chosen.mc_mean,
        mc_std_error=chosen.mc_std_error,
        tau_terms=chosen.tau_terms,
        R=concentration.R,
        seed=concentration.seed,
        colnorm=chosen.colnorm,
        components={"concentration": concentration.value, "union_bound": union.value},
        note=f"selected {chosen.method}",
    )


def ideal_threshold(X, q, noise: NoiseModel, level: float, expectation: float) -> Threshold:
    """Expectation-plus-deviation critical value with a known expectation."""
    X = _matrix(X)
    colnorm = column_norm_functional(X, q)
    t = tau(noise, colnorm, X.shape[0], level)
    return Threshold(
        value=float(expectation) + t,
        method="ideal",
        level=level,
        mc_mean=float(expectation),
        tau_terms=(("tau_alpha", t),),
        colnorm=colnorm,
    )


def separation_delta(X, q, noise: NoiseModel, R: int, alpha_split: AlphaSplit,
                     beta_split: AlphaSplit, mc_mean_estimate: float,
                     method: str = "concentration") -> SeparationBound:
    """Separation needed to detect an alternative with probability 1 - beta.

    Concentration form:
        2 E + tau(a1) + sqrt(1/R) tau(a2) + sqrt(1/R) tau(b1) + tau(b2),
    with E replaced by ``mc_mean_estimate``.  The q = inf union form
    r_alpha + r_beta is reported alongside.
    """
    X = _matrix(X)
    q = parse_order(q)
    n = X.shape[0]
    colnorm = column_norm_functional(X, q)
    conc = (2.0 * mc_mean_estimate
            + tau(noise, colnorm, n, alpha_split.a1)
            + math.sqrt(1.0 / R) * tau(noise, colnorm, n, alpha_split.a2)
            + math.sqrt(1.0 / R) * tau(noise, colnorm, n, beta_split.a1)
            + tau(noise, colnorm, n, beta_split.a2))
    union = None
    if math.isinf(q):
        union = (union_bound_threshold(X, noise.scale, alpha_split.total).value
                 + union_bound_threshold(X, noise.scale, beta_split.total).value)
    if method == "concentration":
        value = conc
    elif method == "union":
        if union is None:
            raise ValueError("union separation bound requires q = inf")
        value = union
    elif method == "min":
        value = conc if union is None else min(conc, union)
    else:
        raise ValueError(f"unknown separation method {method!r}")
    return SeparationBound(
        value=value,
        method=method,
        alpha=alpha_split.total,
        beta=beta_split.total,
        concentration=conc,
        union=union,
    )


def rademacher_threshold(X, Y, R: int, split: AlphaSplit, seed: int,
                         stream_index: int = 0, q="inf") -> Threshold:
    """Symmetrization-based critical value for responses in [0, 1].

    ``value = (2/R) sum_r ||(1/n) sum_i eps_ir Y_i X_i||_q
              + tau(a1) + 2 tau(a2) + (4/sqrt(R)) tau(a3)``
    with unit deviation scale (responses live in an interval of width one)
    and seeded Rademacher signs eps.
    """
    X = _matrix(X)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 1 or Y.shape[0] != X.shape[0]:
        raise ValueError("response vector must have one entry per instrument row")
    if np.any(Y < 0.0) or np.any(Y > 1.0):
        raise ValueError("responses must lie in [0, 1]; rescale them first")
    if split.a3 is None:
        raise ValueError("bounded-response threshold needs a three-way split")
    if R < 1:
        raise ValueError("R must be at least 1")
    q = parse_order(q)
    n = X.shape[0]
    gen = rng.stream(seed, rng.RADEMACHER, stream_index)
    YX = Y[:, None] * X
    vals = np.empty(R)
    done = 0
    while done < R:
        block = min(_MC_BLOCK, R - done)
        signs = gen.integers(0, 2, size=(block, n)).astype(float) * 2.0 - 1.0
        vals[done:done + block] = lq_norm_rows((signs @ YX) / n, q)
        done += block
    mc = 2.0 * float(vals.mean())
    mc_se = 2.0 * float(vals.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    unit = NoiseModel.bounded(0.0, 1.0)
    colnorm = column_norm_functional(X, q)
    t1 = tau(unit, colnorm, n, split.a1)
    t2 = 2.0 * tau(unit, colnorm, n, split.a2)
    t3 = (4.0 / math.sqrt(R)) * tau(unit, colnorm, n, split.a3)
    return Threshold(
        value=mc + t1 + t2 + t3,
        method="rademacher",
        level=split.total,
        mc_mean=mc,
        mc_std_error=mc_se,
        tau_terms=(("tau_a1", t1), ("2_tau_a2", t2), ("4_tau_a3_over_sqrtR", t3)),
        R=R,
        seed=seed,
        colnorm=colnorm,
    )


@dataclass(frozen=True)
class SigmaBound:
    """Data-driven standard deviation bound used when sigma is unknown."""

    b_kappa: float
    c_n: float
    sigma_hat: float
    kappa: float
    note: str = ("computed exactly as stated: for small kappa the normal "
                 "quantile of kappa/2 is negative, so the bound can fall "
                 "below the raw sample standard deviation")


def sigma_upper_bound(Y, kappa: float) -> SigmaBound:
    """Bound sqrt(Var(Y_i)) from the sample with failure probability kappa.

    ``sigma_hat / (C_n - Phi^{-1}(kappa/2)/sqrt(n))`` with
    ``C_n = sqrt(2/n) Gamma(n/2)/Gamma((n-1)/2)`` evaluated via log-gamma.
    """
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    if Y.ndim != 1 or n < 2:
        raise ValueError("need a 1-d response sample with n >= 2")
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    sigma_hat = float(np.sqrt(np.mean((Y - Y.mean()) ** 2)))
    c_n = chi_mean_factor(n)
    denom = c_n - inverse_normal_cdf(kappa / 2.0) / math.sqrt(n)
    return SigmaBound(b_kappa=sigma_hat / denom, c_n=c_n, sigma_hat=sigma_hat, kappa=kappa)


def gaussian_max_lower(X) -> float:
    """Comparison-based lower bound on E ||(1/n) X^T W||_inf at unit sigma.

    Valid for L >= 20.  The pairwise minimum runs over distinct column
    pairs: the degenerate j = l pair would make the bound vacuously zero.
    """
    X = _matrix(X)
    n, L = X.shape
    if L < 20:
        raise ValueError("lower bound applies only for L >= 20")
    G = X.T @ X
    sq = np.diag(G)
    dist2 = sq[:, None] + sq[None, :] - 2.0 * G
    iu = np.triu_indices(L, k=1)
    m = float(np.min(dist2[iu]))
    m = max(m, 0.0)
    return 0.5 * (1.0 - 1.0 / math.e) * math.sqrt(math.log(L) / (4.0 * n * n) * m)


def gaussian_max_upper(X) -> float:
    """Tail-sum upper bound on E ||(1/n) X^T W||_inf at unit sigma (L >= 2)."""
    X = _matrix(X)
    n, L = X.shape
    if L < 2:
        raise ValueError("upper bound applies only for L >= 2")
    mx = float(np.max(np.sum(X * X, axis=0)))
    return (math.sqrt(2.0 * math.log(L) / (n * n) * mx)
            + math.sqrt(8.0 / (n * n * math.log(L)) * mx))


def gaussian_max_bounds(X):
    """(lower, upper) expectation bracket; requires L >= 20."""
    return gaussian_max_lower(X), gaussian_max_upper(X)


def _matrix(X) -> np.ndarray:
    from .norms import InstrumentMatrix

    if isinstance(X, InstrumentMatrix):
        return X.X
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("instrument matrix must be 2-d")
    return X
