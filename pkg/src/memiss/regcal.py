"""Regression calibration: conditional mean imputation of the true exposure.

Estimate E(X | measures, Z) from the substudy, substitute it for X in the
outcome model, and correct the standard errors for the estimated calibration
parameters by the delta method or by bootstrapping both stages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    CALIBRATION,
    Dataset,
    OutcomeSpec,
    REPLICATION,
    RngStream,
    StudyDesign,
    VALIDATION,
    WEIBULL,
)
from .exceptions import InsufficientDataError, MissingMeasureError, UnsupportedConfigError
from .linmod import FitResult, bootstrap, fit_ols, fit_outcome_model

VALIDATION_SOURCE = "validation"
CROSSREG_SOURCE = "replication_crossreg"
RANDOM_INTERCEPT_SOURCE = "replication_random_intercept"
CALIBRATION_SOURCE = "calibration"


@dataclass(frozen=True)
class CalibrationModel:
    """Fitted calibration: the parameters behind E(X | measures, Z).

    For the regression sources (validation, cross-regression, calibration)
    ``params`` are the linear coefficients (gamma0, gamma_measure, gamma_Z...).
    For the replication random-intercept source they are the method-of-moments
    primitives: the exposure mean coefficients on (1, Z), var(X|Z), and
    sigma2_u; the single-measure linear form is derived from these.
    ``residual_variance`` is var(X | conditioning set) for an r=0 row.
    """

    source: str
    param_names: tuple[str, ...]
    params: np.ndarray
    cov_params: np.ndarray
    residual_variance: float
    covariates: tuple[str, ...]
    notes: tuple[str, ...] = ()
    n_fit: int = 0

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float))
        object.__setattr__(self, "cov_params", np.asarray(self.cov_params, dtype=float))
        if self.residual_variance < -1e-12:
            raise ValueError("residual variance must be >= 0")

    def gamma(self) -> dict[str, float]:
        """Single-measure linear calibration coefficients (intercept, measure, Z...)."""
        if self.source != RANDOM_INTERCEPT_SOURCE:
            return dict(zip(self.param_names, self.params))
        d = dict(zip(self.param_names, self.params))
        v, s2u = d["var_x_given_z"], d["sigma2_u"]
        w1 = v / (v + s2u) if v + s2u > 0 else 1.0
        out = {"intercept": d["mean_intercept"] * (1.0 - w1), "measure": w1}
        for c in self.covariates:
            out[c] = d[f"mean_{c}"] * (1.0 - w1)
        return out


def _complete_covariate_rows(ds: Dataset, covariates) -> np.ndarray:
    keep = np.ones(ds.n, dtype=bool)
    for c in covariates:
        keep &= ~ds.miss(c)
    return keep


def _zmat(ds: Dataset, covariates, rows) -> np.ndarray:
    if not covariates:
        return np.empty((int(np.sum(rows)), 0))
    return np.column_stack([ds.vals(c)[rows] for c in covariates])


def fit_calibration(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec,
                    variant: str = "random_intercept") -> CalibrationModel:
    """Fit the calibration model appropriate to the study design.

    validation:   regress observed X on (measure, Z) over r=1 rows.
    replication:  default is the efficient random-intercept measurement model
                  fitted by closed-form method of moments; ``variant="crossreg"``
                  keeps the simple regression of the second measure on the first.
    calibration:  regress the unbiased second-type measure (averaged when two
                  are present) on (first measure, Z) over r=1 rows.
    """
    covs = tuple(outcome.covariates)
    notes = []
    zok = _complete_covariate_rows(ds, covs)
    n_dropped = int(ds.n - zok.sum())
    if n_dropped:
        notes.append(f"dropped {n_dropped} rows with missing covariates from calibration fitting")

    if design.kind == VALIDATION or (design.kind == REPLICATION and variant == "crossreg") or design.kind == CALIBRATION:
        if design.kind == VALIDATION:
            lhs_col, meas_col = design.role("x"), design.role("xstar")
            fit_rows = (ds.r == 1) & zok & ~ds.miss(lhs_col) & ~ds.miss(meas_col)
            lhs = ds.vals(lhs_col)[fit_rows]
            source = VALIDATION_SOURCE
        elif design.kind == REPLICATION:
            meas_col = design.role("xstar1")
            lhs_col = design.role("xstar2")
            fit_rows = (ds.r == 1) & zok & ~ds.miss(lhs_col) & ~ds.miss(meas_col)
            lhs = ds.vals(lhs_col)[fit_rows]
            source = CROSSREG_SOURCE
        else:
            meas_col = design.role("xstar")
            if "xstarstar" in design.columns:
                second = [design.role("xstarstar")]
            else:
                second = [design.role("xstarstar1"), design.role("xstarstar2")]
            fit_rows = (ds.r == 1) & zok & ~ds.miss(meas_col)
            for c in second:
                fit_rows &= ~ds.miss(c)
            lhs = np.mean([ds.vals(c)[fit_rows] for c in second], axis=0)
            source = CALIBRATION_SOURCE
        names = ("intercept", "measure") + covs
        n_fit = int(fit_rows.sum())
        if n_fit < len(names) + 2:
            raise InsufficientDataError(
                f"calibration fit needs at least {len(names) + 2} usable r=1 rows, found {n_fit}"
            )
        X = np.column_stack([np.ones(n_fit), ds.vals(meas_col)[fit_rows], _zmat(ds, covs, fit_rows)])
        ols = fit_ols(X, lhs, names=names)
        resid_var = float(ols.metadata["sigma2"])
        if source == VALIDATION_SOURCE and resid_var < 1e-12 and abs(ols.coef("measure") - 1.0) < 1e-8:
            notes.append("estimated measurement error variance is zero; no correction needed")
        return CalibrationModel(
            source=source, param_names=names, params=ols.beta, cov_params=ols.cov,
            residual_variance=resid_var, covariates=covs, notes=tuple(notes), n_fit=n_fit,
        )

    if design.kind != REPLICATION:
        raise UnsupportedConfigError(f"no calibration fit for design {design.kind!r}")

    # Replication random-intercept measurement model by method of moments:
    # sigma2_u from half the variance of within-pair differences, the
    # between-person mean function and variance from the pooled measures.
    x1c, x2c = design.role("xstar1"), design.role("xstar2")
    pair_rows = (ds.r == 1) & ~ds.miss(x1c) & ~ds.miss(x2c)
    n_pairs = int(pair_rows.sum())
    if n_pairs < 2:
        raise InsufficientDataError("random-intercept calibration needs >= 2 r=1 replicate pairs")
    diffs = ds.vals(x1c)[pair_rows] - ds.vals(x2c)[pair_rows]
    sigma2_u = 0.5 * float(np.var(diffs, ddof=1))
    if sigma2_u == 0.0:
        notes.append("estimated measurement error variance is zero; no correction needed")

    # Pooled (stacked) regression of all available measures on Z.
    rows1 = zok & ~ds.miss(x1c)
    rows2 = zok & ~ds.miss(x2c)
    stacked_y = np.concatenate([ds.vals(x1c)[rows1], ds.vals(x2c)[rows2]])
    names_mean = ("mean_intercept",) + tuple(f"mean_{c}" for c in covs)
    Zs = np.vstack([
        np.column_stack([np.ones(int(rows1.sum())), _zmat(ds, covs, rows1)]),
        np.column_stack([np.ones(int(rows2.sum())), _zmat(ds, covs, rows2)]),
    ])
    if Zs.shape[0] < Zs.shape[1] + 2:
        raise InsufficientDataError("too few rows to estimate the exposure mean function")
    mean_fit = fit_ols(Zs, stacked_y, names=names_mean)
    total_var = float(mean_fit.metadata["sigma2"])
    var_x = total_var - sigma2_u
    if var_x < 0.0:
        warnings.warn("moment estimate of var(X|Z) was negative; clipped at 0", stacklevel=2)
        notes.append("between-person variance clipped at 0")
        var_x = 0.0

    params = np.concatenate([mean_fit.beta, [var_x, sigma2_u]])
    names = names_mean + ("var_x_given_z", "sigma2_u")
    # Block-diagonal covariance: normal-theory variances for the two moment
    # pieces, treated as independent of the mean coefficients.
    cov = np.zeros((len(params), len(params)))
    k = len(mean_fit.beta)
    cov[:k, :k] = mean_fit.cov
    df_e = max(Zs.shape[0] - Zs.shape[1], 1)
    var_s2u = 2.0 * sigma2_u**2 / max(n_pairs - 1, 1)
    var_total = 2.0 * total_var**2 / df_e
    cov[k, k] = var_total + var_s2u
    cov[k + 1, k + 1] = var_s2u
    cov[k, k + 1] = cov[k + 1, k] = -var_s2u
    resid_var = var_x * sigma2_u / (var_x + sigma2_u) if var_x + sigma2_u > 0 else 0.0
    return CalibrationModel(
        source=RANDOM_INTERCEPT_SOURCE, param_names=names, params=params, cov_params=cov,
        residual_variance=resid_var, covariates=covs, notes=tuple(notes), n_fit=n_pairs,
    )


def conditional_mean(cm: CalibrationModel, ds: Dataset, design: StudyDesign) -> np.ndarray:
    """Imputed exposure for every row: E(X | available measures, Z).

    Validation rows with X observed pass the observed value through. For the
    random-intercept source, r=1 rows with both replicates use the two-measure
    shrinkage E(X | (x1+x2)/2, Z); other rows the single-measure form.
    Rows lacking a required measure or covariate raise MissingMeasureError.
    """
    covs = cm.covariates
    zbad = ~_complete_covariate_rows(ds, covs)
    if zbad.any():
        raise MissingMeasureError(
            "rows with missing covariates cannot be calibrated", rows=np.flatnonzero(zbad)
        )
    Z = _zmat(ds, covs, np.ones(ds.n, dtype=bool))

    if cm.source == RANDOM_INTERCEPT_SOURCE:
        d = dict(zip(cm.param_names, cm.params))
        m = np.full(ds.n, d["mean_intercept"])
        if covs:
            m = m + Z @ [d[f"mean_{c}"] for c in covs]
        v, s2u = d["var_x_given_z"], d["sigma2_u"]
        x1 = ds.vals(design.role("xstar1"))
        x2 = ds.vals(design.role("xstar2"))
        bad = np.isnan(x1)
        if bad.any():
            raise MissingMeasureError(
                "rows with the first measure missing cannot be calibrated; "
                "use the Bayesian or MI methods for partially missing measures",
                rows=np.flatnonzero(bad),
            )
        both = ~np.isnan(x2)
        w1 = v / (v + s2u) if v + s2u > 0 else 1.0
        w2 = v / (v + s2u / 2.0) if v + s2u > 0 else 1.0
        xhat = m + (x1 - m) * w1
        xbar = 0.5 * (x1 + x2)
        xhat[both] = m[both] + (xbar[both] - m[both]) * w2
        return xhat

    gamma = cm.gamma()
    meas_role = {"validation": "xstar", "replication_crossreg": "xstar1", "calibration": "xstar"}[cm.source]
    meas = ds.vals(design.role(meas_role))
    bad = np.isnan(meas)
    if bad.any():
        raise MissingMeasureError(
            "rows with the error-prone measure missing cannot be calibrated",
            rows=np.flatnonzero(bad),
        )
    xhat = gamma["intercept"] + gamma["measure"] * meas
    if covs:
        xhat = xhat + Z @ [gamma[c] for c in covs]
    if cm.source == VALIDATION_SOURCE:
        xcol = design.role("x")
        observed = ~ds.miss(xcol)
        xhat = np.where(observed, ds.vals(xcol), xhat)
    return xhat


def _refit_with_params(cm: CalibrationModel, params, ds, design, outcome) -> np.ndarray:
    cm2 = CalibrationModel(
        source=cm.source, param_names=cm.param_names, params=params,
        cov_params=cm.cov_params, residual_variance=cm.residual_variance,
        covariates=cm.covariates, n_fit=cm.n_fit,
    )
    xhat = conditional_mean(cm2, ds, design)
    return fit_outcome_model(ds, outcome, xhat).beta


def _delta_covariance(cm: CalibrationModel, fit: FitResult, ds, design, outcome) -> np.ndarray:
    """Plug-in covariance plus the calibration-uncertainty term D cov(phi) D'.

    D = d beta_hat / d phi is computed by central finite differences through
    the two-stage estimator, which implements the delta propagation without
    per-family hand derivatives.
    """
    phi = cm.params
    D = np.empty((len(fit.beta), len(phi)))
    for k in range(len(phi)):
        h = 1e-5 * max(1.0, abs(phi[k]))
        hi, lo = phi.copy(), phi.copy()
        hi[k] += h
        lo[k] -= h
        if cm.param_names[k] in ("var_x_given_z", "sigma2_u"):
            lo[k] = max(lo[k], 0.0)
        D[:, k] = (_refit_with_params(cm, hi, ds, design, outcome)
                   - _refit_with_params(cm, lo, ds, design, outcome)) / (hi[k] - lo[k])
    return fit.cov + D @ cm.cov_params @ D.T


def regression_calibration(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec,
                           se_method: str = "delta", B: int = 200,
                           rng: RngStream | None = None, variant: str = "random_intercept",
                           level: float = 0.95) -> FitResult:
    """Two-stage corrected fit: calibration model, then the outcome model on
    the imputed conditional means.

    ``se_method="delta"`` propagates the calibration parameter covariance
    through the second stage (linear and logistic outcomes); ``"bootstrap"``
    refits both stages in each replicate. The delta method is not available
    for Weibull outcomes and falls back to the bootstrap with a warning.
    """
    notes: list[str] = []
    if se_method == "delta" and outcome.kind == WEIBULL:
        warnings.warn("delta-method SEs unavailable for Weibull outcomes; using bootstrap", stacklevel=2)
        notes.append("delta unavailable for weibull; fell back to bootstrap")
        se_method = "bootstrap"
    if se_method not in ("delta", "bootstrap"):
        raise UnsupportedConfigError(f"unknown se_method {se_method!r}")

    cm = fit_calibration(ds, design, outcome, variant=variant)
    xhat = conditional_mean(cm, ds, design)
    fit = fit_outcome_model(ds, outcome, xhat)
    plugin_cov = fit.cov
    intervals = None

    if se_method == "delta":
        cov = _delta_covariance(cm, fit, ds, design, outcome)
    else:
        rng = rng or RngStream(0)

        def estimator(sample: Dataset):
            cm_b = fit_calibration(sample, design, outcome, variant=variant)
            xhat_b = conditional_mean(cm_b, sample, design)
            fit_b = fit_outcome_model(sample, outcome, xhat_b)
            return dict(zip(fit_b.names, fit_b.beta))

        boot = bootstrap(estimator, ds, B=B, rng=rng, level=level)
        se = boot.se()
        cov = np.diag(se**2)
        intervals = boot.percentile_interval(level)

    return FitResult(
        names=fit.names, beta=fit.beta, cov=cov, loglik=fit.loglik,
        converged=fit.converged, n_iter=fit.n_iter, grad_norm=fit.grad_norm,
        shape=fit.shape, method="rc", intervals=intervals, level=level,
        metadata={
            "se_method": se_method,
            "calibration": {
                "source": cm.source,
                "params": dict(zip(cm.param_names, cm.params.tolist())),
                "residual_variance": cm.residual_variance,
                "n_fit": cm.n_fit,
                "notes": list(cm.notes) + notes,
            },
            "plugin_cov": plugin_cov,
            "n_used": fit.metadata.get("n_used"),
            "n_dropped": fit.metadata.get("n_dropped"),
        },
    )
