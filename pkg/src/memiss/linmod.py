"""Regression engines every correction method builds on.

Ordinary least squares, logistic regression via iteratively reweighted least
squares, right-censored Weibull proportional-hazards maximum likelihood, the
Nelson-Aalen cumulative hazard estimator, and a generic case-resampling
bootstrap driver. Per-record log-density helpers for the three outcome
families live here too so the likelihood, Bayesian, and imputation modules
share one set of formulas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .core import Dataset, OutcomeSpec, StudyDesign, RngStream, LINEAR, LOGISTIC, WEIBULL
from .exceptions import (
    BootstrapError,
    ConvergenceError,
    NoEventsError,
    SeparationError,
    SingularDesignError,
)

GRAD_TOL_LINEAR = 1e-8
GRAD_TOL_WEIBULL = 1e-6
MAX_ITER = 100
SEPARATION_NORM = 1e4


@dataclass(frozen=True)
class FitResult:
    """A fitted regression model: coefficients, covariance, and diagnostics.

    ``intervals`` overrides Wald intervals when a method supplies its own
    (bootstrap percentile, profile likelihood, Rubin t). For Weibull fits
    ``shape`` carries the hazard shape on the natural scale.
    """

    names: tuple[str, ...]
    beta: np.ndarray
    cov: np.ndarray
    loglik: float
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0
    shape: float | None = None
    method: str = ""
    intervals: Mapping[str, tuple[float, float]] | None = None
    level: float = 0.95
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def conf_int(self, level: float | None = None) -> dict[str, tuple[float, float]]:
        """Interval estimates: explicit intervals if attached, else Wald."""
        if self.intervals is not None and (level is None or level == self.level):
            return dict(self.intervals)
        level = self.level if level is None else level
        z = stats.norm.ppf(0.5 + level / 2.0)
        se = self.se()
        return {
            name: (float(b - z * s), float(b + z * s))
            for name, b, s in zip(self.names, self.beta, se)
        }


def _check_rank(X: np.ndarray, names: Sequence[str] | None):
    n, p = X.shape
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < p:
        bad = piv[rank:]
        labels = [names[j] if names else f"col{j}" for j in sorted(bad)]
        raise SingularDesignError(labels)


# ---------------------------------------------------------------------------
# Per-record outcome log densities and their derivatives in the linear
# predictor eta. These are the single source of the three families' formulas.

def linear_logpdf(y, eta, sigma2):
    return -0.5 * np.log(2.0 * np.pi * sigma2) - (y - eta) ** 2 / (2.0 * sigma2)


def logistic_logpmf(y, eta):
    # y*eta - log(1 + exp(eta)), stable for large |eta|
    return y * eta - np.logaddexp(0.0, eta)


def weibull_logdensity(t, d, eta, shape):
    """Event density / censoring survival for hazard r t^(r-1) exp(eta)."""
    logt = np.log(t)
    return d * (np.log(shape) + (shape - 1.0) * logt + eta) - t**shape * np.exp(eta)


def outcome_logdensity_deta(kind, y_parts, eta, aux):
    """(d0, d1, d2): per-record log density and first two eta derivatives.

    ``y_parts`` is y for linear/logistic and (t, d) for weibull; ``aux`` is
    sigma2 for linear, the shape for weibull, unused for logistic.
    """
    if kind == LINEAR:
        y = y_parts
        d0 = linear_logpdf(y, eta, aux)
        d1 = (y - eta) / aux
        d2 = np.broadcast_to(-1.0 / aux, np.shape(eta))
        return d0, d1, d2
    if kind == LOGISTIC:
        y = y_parts
        p = expit(eta)
        return logistic_logpmf(y, eta), y - p, -p * (1.0 - p)
    if kind == WEIBULL:
        t, d = y_parts
        H = t**aux * np.exp(eta)
        return weibull_logdensity(t, d, eta, aux), d - H, -H
    raise ValueError(f"unknown outcome kind {kind!r}")


def expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


# ---------------------------------------------------------------------------
# Full-sample log likelihoods with analytic score and observed information.
# The parameter vectors use unconstrained scales (log variance, log shape).

def gaussian_loglik(params, X, y):
    """params = (beta..., log sigma2)."""
    beta, logs2 = params[:-1], params[-1]
    s2 = np.exp(logs2)
    resid = y - X @ beta
    return float(np.sum(linear_logpdf(y, X @ beta, s2)))


def gaussian_score(params, X, y):
    beta, logs2 = params[:-1], params[-1]
    s2 = np.exp(logs2)
    resid = y - X @ beta
    g_beta = X.T @ resid / s2
    g_logs2 = -0.5 * len(y) + np.sum(resid**2) / (2.0 * s2)
    return np.concatenate([g_beta, [g_logs2]])


def gaussian_hessian(params, X, y):
    beta, logs2 = params[:-1], params[-1]
    s2 = np.exp(logs2)
    resid = y - X @ beta
    p = X.shape[1]
    H = np.empty((p + 1, p + 1))
    H[:p, :p] = -X.T @ X / s2
    H[:p, p] = H[p, :p] = -X.T @ resid / s2
    H[p, p] = -np.sum(resid**2) / (2.0 * s2)
    return H


def logistic_loglik(beta, X, y):
    return float(np.sum(logistic_logpmf(y, X @ beta)))


def logistic_score(beta, X, y):
    return X.T @ (y - expit(X @ beta))


def logistic_hessian(beta, X, y):
    p = expit(X @ beta)
    return -(X * (p * (1.0 - p))[:, None]).T @ X


def weibull_loglik(params, X, t, d):
    """params = (log shape, beta...)."""
    shape = np.exp(params[0])
    eta = X @ params[1:]
    return float(np.sum(weibull_logdensity(t, d, eta, shape)))


def weibull_score(params, X, t, d):
    shape = np.exp(params[0])
    eta = X @ params[1:]
    logt = np.log(t)
    H = t**shape * np.exp(eta)
    g_logr = np.sum(d * (1.0 + shape * logt) - shape * H * logt)
    g_beta = X.T @ (d - H)
    return np.concatenate([[g_logr], g_beta])


def weibull_hessian(params, X, t, d):
    shape = np.exp(params[0])
    eta = X @ params[1:]
    logt = np.log(t)
    H = t**shape * np.exp(eta)
    p = X.shape[1]
    out = np.empty((p + 1, p + 1))
    out[0, 0] = np.sum(d * shape * logt - shape * H * logt * (1.0 + shape * logt))
    cross = -X.T @ (shape * H * logt)
    out[0, 1:] = out[1:, 0] = cross
    out[1:, 1:] = -(X * H[:, None]).T @ X
    return out


def _invert_information(H, context):
    """Covariance = inverse of the negated Hessian, symmetrized."""
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        raise ConvergenceError(f"{context}: observed information is singular") from None
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# Fitters

def fit_ols(X, y, names: Sequence[str] | None = None) -> FitResult:
    """Least squares with covariance sigma2_hat (X'X)^-1.

    Raises SingularDesignError naming the collinear columns when the design
    matrix is rank deficient.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = tuple(names) if names else tuple(f"b{j}" for j in range(p))
    _check_rank(X, names)
    beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    rss = float(resid @ resid)
    dof = max(n - p, 1)
    sigma2 = rss / dof
    xtx_inv = np.linalg.inv(X.T @ X)
    cov = sigma2 * xtx_inv
    sigma2_ml = rss / n
    loglik = -0.5 * n * (np.log(2.0 * np.pi * max(sigma2_ml, 1e-300)) + 1.0) if rss > 0 else float("inf")
    return FitResult(
        names=names,
        beta=beta,
        cov=cov,
        loglik=loglik,
        converged=True,
        grad_norm=0.0,
        method="ols",
        metadata={"sigma2": sigma2, "sigma2_ml": sigma2_ml, "rss": rss, "n": n, "xtx_inv": xtx_inv},
    )


def fit_logistic(X, y, names: Sequence[str] | None = None, max_iter: int = MAX_ITER,
                 start: np.ndarray | None = None) -> FitResult:
    """Logistic MLE by IRLS with step halving.

    Convergence is score sup-norm < 1e-8. A coefficient norm exceeding 1e4
    during the iterations is treated as (quasi-)complete separation.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic outcome must be 0/1")
    n, p = X.shape
    names = tuple(names) if names else tuple(f"b{j}" for j in range(p))
    _check_rank(X, names)

    beta = np.zeros(p) if start is None else np.asarray(start, dtype=float).copy()
    ll = logistic_loglik(beta, X, y)
    trace = []
    for it in range(1, max_iter + 1):
        grad = logistic_score(beta, X, y)
        gnorm = float(np.max(np.abs(grad)))
        trace.append((it, ll, gnorm))
        if gnorm < GRAD_TOL_LINEAR:
            # a vanishing score with a perfectly classified sample means the
            # MLE is at infinity: separation, not convergence
            eta = X @ beta
            if ll > -1e-6 and np.all((2.0 * y - 1.0) * eta >= 0) and np.any(eta != 0):
                raise SeparationError(
                    "perfect separation: log likelihood attains 0, coefficients diverge")
            cov = _invert_information(logistic_hessian(beta, X, y), "fit_logistic")
            return FitResult(
                names=names, beta=beta, cov=cov, loglik=ll,
                converged=True, n_iter=it, grad_norm=gnorm, method="logistic",
            )
        H = logistic_hessian(beta, X, y)
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("logistic information matrix singular (separation or collinearity)") from None
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            ll_new = logistic_loglik(cand, X, y)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        beta, ll = cand, ll_new
        if float(np.max(np.abs(beta))) > SEPARATION_NORM:
            raise SeparationError(
                f"coefficients diverging (sup-norm > {SEPARATION_NORM:g}); data are likely separated"
            )
    raise ConvergenceError(f"fit_logistic: no convergence in {max_iter} iterations", trace=trace)


def fit_weibull_ph(t, d, X, names: Sequence[str] | None = None,
                   fix_shape: float | None = None, max_iter: int = MAX_ITER,
                   start: np.ndarray | None = None) -> FitResult:
    """Right-censored Weibull proportional hazards MLE.

    Hazard r t^(r-1) exp(X beta); optimized over (log r, beta) by Newton
    with backtracking line search; covariance from the inverse observed
    information. ``fix_shape`` pins r (the exponential model at r=1).
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if np.any(t <= 0):
        raise ValueError("survival times must be strictly positive")
    if not np.isin(d, (0.0, 1.0)).all():
        raise ValueError("event indicator must be 0/1")
    if d.sum() == 0:
        raise NoEventsError("all observations censored; Weibull MLE undefined")
    n, p = X.shape
    names = tuple(names) if names else tuple(f"b{j}" for j in range(p))
    _check_rank(X, names)

    free_shape = fix_shape is None
    log_r0 = 0.0 if free_shape else float(np.log(fix_shape))
    if start is not None:
        params = np.asarray(start, dtype=float).copy()
        if not free_shape:
            params[0] = log_r0
    else:
        beta = np.zeros(p)
        if np.allclose(X[:, 0], 1.0):
            beta[0] = np.log(d.sum() / np.sum(t ** np.exp(log_r0)))
        params = np.concatenate([[log_r0], beta])

    def mask(v):
        return v if free_shape else v[1:]

    ll = weibull_loglik(params, X, t, d)
    trace = []
    for it in range(1, max_iter + 1):
        grad_full = weibull_score(params, X, t, d)
        grad = mask(grad_full)
        gnorm = float(np.max(np.abs(grad)))
        trace.append((it, ll, gnorm))
        if gnorm < GRAD_TOL_WEIBULL:
            H_full = weibull_hessian(params, X, t, d)
            if free_shape:
                cov_full = _invert_information(H_full, "fit_weibull_ph")
                cov = cov_full[1:, 1:]
                shape_hat = float(np.exp(params[0]))
                shape_se = float(shape_hat * np.sqrt(max(cov_full[0, 0], 0.0)))
            else:
                cov_full = _invert_information(H_full[1:, 1:], "fit_weibull_ph")
                cov = cov_full
                shape_hat, shape_se = float(fix_shape), 0.0
            return FitResult(
                names=names, beta=params[1:], cov=cov, loglik=ll,
                converged=True, n_iter=it, grad_norm=gnorm, shape=shape_hat,
                method="weibull_ph",
                metadata={"shape_se": shape_se, "cov_full": cov_full,
                          "names_full": (("log_shape",) + tuple(names)) if free_shape else tuple(names)},
            )
        H = weibull_hessian(params, X, t, d)
        if not free_shape:
            H = H[1:, 1:]
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            step = grad / max(1.0, np.max(np.abs(grad)))
        scale = 1.0
        cand = params.copy()
        for _ in range(40):
            if free_shape:
                cand = params + scale * step
            else:
                cand = params.copy()
                cand[1:] = params[1:] + scale * step
            ll_new = weibull_loglik(cand, X, t, d)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        params, ll = cand, ll_new
    raise ConvergenceError(f"fit_weibull_ph: no convergence in {max_iter} iterations", trace=trace)


@dataclass(frozen=True)
class NelsonAalen:
    """Right-continuous step estimate of the cumulative hazard."""

    times: np.ndarray
    values: np.ndarray

    def at(self, t) -> np.ndarray:
        """H_hat evaluated at times t (0 before the first event)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate([[0.0], self.values])
        return padded[idx]


def nelson_aalen(t, d) -> NelsonAalen:
    """Cumulative hazard: sum over event times of d_j / (at-risk count)."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(t <= 0):
        raise ValueError("survival times must be strictly positive")
    order = np.argsort(t, kind="stable")
    ts, ds = t[order], d[order]
    n = len(ts)
    event_times = np.unique(ts[ds == 1])
    jumps = np.empty(len(event_times))
    for j, tau in enumerate(event_times):
        at_risk = np.sum(ts >= tau)
        jumps[j] = np.sum(ds[ts == tau]) / at_risk
    return NelsonAalen(times=event_times, values=np.cumsum(jumps))


# ---------------------------------------------------------------------------
# Naive outcome fit (error-prone measure plugged in directly)

def design_matrix(ds: Dataset, outcome: OutcomeSpec, x: np.ndarray):
    """[1, x, Z] plus outcome parts on rows where Z and the outcome are observed."""
    keep = ~np.isnan(x)
    for c in outcome.covariates:
        keep &= ~ds.miss(c)
    for c in outcome.outcome_columns():
        keep &= ~ds.miss(c)
    Z = np.column_stack([ds.vals(c) for c in outcome.covariates]) if outcome.covariates else np.empty((ds.n, 0))
    X = np.column_stack([np.ones(ds.n), x, Z])[keep]
    names = ("intercept", outcome.exposure) + tuple(outcome.covariates)
    if outcome.kind == WEIBULL:
        return X, (ds.vals(outcome.time)[keep], ds.vals(outcome.event)[keep]), names, keep
    return X, ds.vals(outcome.y)[keep], names, keep


def fit_outcome_model(ds: Dataset, outcome: OutcomeSpec, x: np.ndarray) -> FitResult:
    """Fit the substantive model with the supplied exposure values."""
    X, y_parts, names, keep = design_matrix(ds, outcome, x)
    if outcome.kind == LINEAR:
        fit = fit_ols(X, y_parts, names=names)
    elif outcome.kind == LOGISTIC:
        fit = fit_logistic(X, y_parts, names=names)
    else:
        fit = fit_weibull_ph(y_parts[0], y_parts[1], X, names=names)
    fit.metadata["n_used"] = int(keep.sum())
    fit.metadata["n_dropped"] = int(ds.n - keep.sum())
    return fit


def first_measure_column(design: StudyDesign) -> str:
    return design.role(design.always_observed_measures()[0])


def fit_naive(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec) -> FitResult:
    """The uncorrected baseline: outcome regressed on the first error-prone
    measure and Z, complete cases only."""
    x = ds.vals(first_measure_column(design))
    fit = fit_outcome_model(ds, outcome, x)
    return FitResult(
        names=fit.names, beta=fit.beta, cov=fit.cov, loglik=fit.loglik,
        converged=fit.converged, n_iter=fit.n_iter, grad_norm=fit.grad_norm,
        shape=fit.shape, method="naive", metadata=fit.metadata,
    )


# ---------------------------------------------------------------------------
# Bootstrap

@dataclass(frozen=True)
class BootstrapResult:
    names: tuple[str, ...]
    point: np.ndarray
    estimates: np.ndarray
    n_failed: int
    level: float

    @property
    def B(self) -> int:
        return self.estimates.shape[0] + self.n_failed

    def se(self) -> np.ndarray:
        return np.std(self.estimates, axis=0, ddof=1)

    def percentile_interval(self, level: float | None = None) -> dict[str, tuple[float, float]]:
        level = self.level if level is None else level
        alpha = (1.0 - level) / 2.0
        lo = np.quantile(self.estimates, alpha, axis=0)
        hi = np.quantile(self.estimates, 1.0 - alpha, axis=0)
        return {n: (float(a), float(b)) for n, a, b in zip(self.names, lo, hi)}

    def normal_interval(self, level: float | None = None) -> dict[str, tuple[float, float]]:
        level = self.level if level is None else level
        z = stats.norm.ppf(0.5 + level / 2.0)
        se = self.se()
        return {
            n: (float(p - z * s), float(p + z * s))
            for n, p, s in zip(self.names, self.point, se)
        }


def _as_named_vector(value, fallback_prefix="est"):
    if isinstance(value, Mapping):
        return tuple(value.keys()), np.array([float(v) for v in value.values()])
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    return tuple(f"{fallback_prefix}{i}" for i in range(arr.size)), arr


def bootstrap(estimator: Callable[[Dataset], object], ds: Dataset, B: int, rng: RngStream,
              level: float = 0.95, stratify_r: bool = False,
              max_failure_fraction: float = 0.10) -> BootstrapResult:
    """Case-resampling bootstrap of an arbitrary estimator.

    Rows are resampled whole (the r indicator travels with its row), so the
    two-phase design is respected; ``stratify_r`` resamples within the r=0
    and r=1 strata separately. Replicates that raise are counted; more than
    ``max_failure_fraction`` failures aborts with a diagnostic.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    names, point = _as_named_vector(estimator(ds))
    idx0 = np.flatnonzero(ds.r == 0)
    idx1 = np.flatnonzero(ds.r == 1)
    estimates = []
    n_failed = 0
    first_error = None
    for b in range(B):
        g = rng.split(b).generator()
        if stratify_r:
            take = np.concatenate([
                idx0[g.integers(0, len(idx0), len(idx0))] if len(idx0) else idx0,
                idx1[g.integers(0, len(idx1), len(idx1))] if len(idx1) else idx1,
            ])
        else:
            take = g.integers(0, ds.n, ds.n)
        try:
            _, est = _as_named_vector(estimator(ds.take(take)))
            if est.shape != point.shape:
                raise ValueError("estimator returned inconsistent shape")
            estimates.append(est)
        except Exception as e:  # noqa: BLE001 - failures are data here
            n_failed += 1
            if first_error is None:
                first_error = e
    if n_failed > max_failure_fraction * B:
        raise BootstrapError(
            f"{n_failed}/{B} bootstrap replicates failed (first: {first_error!r})",
            n_failed=n_failed, n_total=B, first_error=first_error,
        )
    return BootstrapResult(
        names=names, point=point, estimates=np.asarray(estimates),
        n_failed=n_failed, level=level,
    )
