"""Maximum-likelihood correction via the observed-data likelihood.

The latent true exposure is integrated out of each record's contribution by
adaptive Gauss-Hermite quadrature (recentered at the per-record integrand
mode), the likelihood is maximized by quasi-Newton with analytic gradients,
and inference is Wald (inverse observed information) or profile likelihood.

The joint model factorises as outcome * measurement * exposure under
non-differential error; the exposure model is linear-Gaussian X | Z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import optimize, stats

from .core import (
    CALIBRATION,
    Dataset,
    ErrorModelSpec,
    LINEAR,
    LOGISTIC,
    OutcomeSpec,
    REPLICATION,
    RngStream,
    StudyDesign,
    VALIDATION,
    WEIBULL,
)
from .exceptions import (
    ConvergenceError,
    IdentifiabilityError,
    UnsupportedConfigError,
)
from .linmod import FitResult, fit_naive, fit_ols

DEFAULT_K = 32
_JITTER_SEED = 271828


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes/weights; recentering happens per record at use."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if len(nodes) < 2:
            raise ValueError("quadrature rule needs K >= 2 nodes")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if not np.isclose(weights.sum(), np.sqrt(np.pi), rtol=1e-10):
            raise ValueError("Gauss-Hermite weights must sum to sqrt(pi)")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def K(self) -> int:
        return len(self.nodes)

    @classmethod
    def gauss_hermite(cls, K: int) -> "QuadratureRule":
        nodes, weights = np.polynomial.hermite.hermgauss(K)
        return cls(nodes=nodes, weights=weights)


@dataclass(frozen=True)
class JointModelSpec:
    """Outcome, measurement-error, and exposure-model parameters by name.

    Values are on the natural scale; variances are log-parameterized
    internally for unconstrained optimization.
    """

    design: StudyDesign
    outcome: OutcomeSpec
    error: ErrorModelSpec
    params: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        for name, value in self.params.items():
            if name.startswith("sigma2") and value <= 0:
                raise ValueError(f"{name} must be > 0")


# ---------------------------------------------------------------------------
# Parameter layout

@dataclass(frozen=True)
class _Layout:
    internal: tuple[str, ...]
    reported: tuple[str, ...]
    log_scale: tuple[bool, ...]
    outcome_kind: str
    systematic: bool
    shared_classical: bool  # at least one classical-variance measure present

    @property
    def size(self) -> int:
        return len(self.internal)

    def to_natural(self, flat: np.ndarray) -> np.ndarray:
        out = flat.copy()
        for j, is_log in enumerate(self.log_scale):
            if is_log:
                out[j] = np.exp(out[j])
        return out

    def natural_jacobian(self, flat: np.ndarray) -> np.ndarray:
        d = np.ones(self.size)
        for j, is_log in enumerate(self.log_scale):
            if is_log:
                d[j] = np.exp(flat[j])
        return np.diag(d)

    def from_params(self, params: Mapping[str, float]) -> np.ndarray:
        flat = np.empty(self.size)
        for j, (iname, rname, is_log) in enumerate(zip(self.internal, self.reported, self.log_scale)):
            if rname not in params:
                raise KeyError(f"parameter {rname!r} missing from spec")
            flat[j] = np.log(params[rname]) if is_log else params[rname]
        return flat


def _build_layout(design: StudyDesign, outcome: OutcomeSpec, error: ErrorModelSpec) -> _Layout:
    covs = outcome.covariates
    internal: list[str] = []
    reported: list[str] = []
    log_scale: list[bool] = []

    def add(iname, rname, is_log=False):
        internal.append(iname)
        reported.append(rname)
        log_scale.append(is_log)

    if outcome.kind == WEIBULL:
        add("log_shape", "shape", True)
    add("alpha", "intercept")
    add("beta_x", outcome.exposure)
    for c in covs:
        add(f"beta_{c}", c)
    if outcome.kind == LINEAR:
        add("log_sigma2_y", "sigma2_y", True)

    systematic = design.kind == CALIBRATION or error.kind == "systematic"
    if systematic:
        add("theta0", "theta0")
        add("theta1", "theta1")
        add("log_sigma2_ustar", "sigma2_ustar", True)
    shared_classical = not (systematic and design.kind == VALIDATION)
    if shared_classical:
        add("log_sigma2_u", "sigma2_u", True)

    add("gamma0", "gamma_intercept")
    for c in covs:
        add(f"gamma_{c}", f"gamma_{c}")
    add("log_sigma2_x", "sigma2_x", True)

    return _Layout(
        internal=tuple(internal), reported=tuple(reported), log_scale=tuple(log_scale),
        outcome_kind=outcome.kind, systematic=systematic, shared_classical=shared_classical,
    )


def _idx(layout: _Layout, name: str) -> int:
    return layout.internal.index(name)


# ---------------------------------------------------------------------------
# Data preparation

@dataclass
class _Group:
    """Rows sharing a latent/observed treatment: outcome parts, Z, measures."""

    n: int
    y_parts: object           # y (n,1) or (t (n,1), d (n,1))
    Z: np.ndarray              # (n, q)
    measures: list             # list of (values (n,1), obs (n,1) bool, systematic flag)
    x_obs: np.ndarray | None = None  # observed exposure for direct rows


@dataclass
class _MlData:
    latent: _Group | None
    direct: _Group | None
    n_used: int
    n_dropped: int
    n_pairs: int


def _collect(ds: Dataset, outcome: OutcomeSpec, rows: np.ndarray, measure_cols, x_col=None) -> _Group:
    n = int(rows.sum())
    Z = np.column_stack([ds.vals(c)[rows] for c in outcome.covariates]) if outcome.covariates else np.empty((n, 0))
    if outcome.kind == WEIBULL:
        y_parts = (ds.vals(outcome.time)[rows][:, None], ds.vals(outcome.event)[rows][:, None])
    else:
        y_parts = ds.vals(outcome.y)[rows][:, None]
    measures = []
    for col, systematic in measure_cols:
        vals = ds.vals(col)[rows]
        obs = ~ds.miss(col)[rows]
        safe = np.where(obs, vals, 0.0)
        measures.append((safe[:, None], obs[:, None], systematic))
    x_obs = ds.vals(x_col)[rows] if x_col else None
    return _Group(n=n, y_parts=y_parts, Z=Z, measures=measures, x_obs=x_obs)


def _prepare(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec, error: ErrorModelSpec) -> _MlData:
    if not error.nondifferential:
        raise UnsupportedConfigError("maximum likelihood requires non-differential error")
    keep = np.ones(ds.n, dtype=bool)
    for c in outcome.covariates:
        keep &= ~ds.miss(c)
    for c in outcome.outcome_columns():
        keep &= ~ds.miss(c)
    n_dropped = int(ds.n - keep.sum())

    if design.kind == VALIDATION:
        xcol = design.role("x")
        meas = [(design.role("xstar"), error.kind == "systematic")]
        direct_rows = keep & ~ds.miss(xcol)
        latent_rows = keep & ds.miss(xcol)
        n_pairs = int(direct_rows.sum())
        if n_pairs < 2:
            raise IdentifiabilityError("validation ML needs >= 2 rows with the true exposure observed")
        latent = _collect(ds, outcome, latent_rows, meas) if latent_rows.any() else None
        direct = _collect(ds, outcome, direct_rows, meas, x_col=xcol)
        return _MlData(latent=latent, direct=direct, n_used=int(keep.sum()), n_dropped=n_dropped, n_pairs=n_pairs)

    if design.kind == REPLICATION:
        x1, x2 = design.role("xstar1"), design.role("xstar2")
        n_pairs = int((keep & ~ds.miss(x1) & ~ds.miss(x2)).sum())
        if n_pairs < 2:
            raise IdentifiabilityError(
                "replication ML needs >= 2 rows with both replicate measures; "
                "sigma2_u is not identified without them"
            )
        latent = _collect(ds, outcome, keep, [(x1, False), (x2, False)])
        return _MlData(latent=latent, direct=None, n_used=int(keep.sum()), n_dropped=n_dropped, n_pairs=n_pairs)

    if design.kind == CALIBRATION:
        meas = [(design.role("xstar"), True)]
        if "xstarstar" in design.columns:
            second = [design.role("xstarstar")]
        else:
            second = [design.role("xstarstar1"), design.role("xstarstar2")]
        for c in second:
            meas.append((c, False))
        have_second = keep.copy()
        for c in second:
            have_second &= ~ds.miss(c)
        n_pairs = int(have_second.sum())
        if n_pairs < 2:
            raise IdentifiabilityError("calibration ML needs >= 2 rows with the unbiased measure(s)")
        latent = _collect(ds, outcome, keep, meas)
        return _MlData(latent=latent, direct=None, n_used=int(keep.sum()), n_dropped=n_dropped, n_pairs=n_pairs)

    raise UnsupportedConfigError(f"unknown design {design.kind!r}")


# ---------------------------------------------------------------------------
# Log joint density g(x) per record, derivatives in x, and parameter gradients

def _unpack(flat: np.ndarray, layout: _Layout, q: int) -> dict:
    p = {}
    i = 0
    if layout.outcome_kind == WEIBULL:
        p["shape"] = np.exp(flat[i]); i += 1
    p["alpha"] = flat[i]; i += 1
    p["beta_x"] = flat[i]; i += 1
    p["beta_z"] = flat[i:i + q]; i += q
    if layout.outcome_kind == LINEAR:
        p["sigma2_y"] = np.exp(flat[i]); i += 1
    if layout.systematic:
        p["theta0"] = flat[i]; i += 1
        p["theta1"] = flat[i]; i += 1
        p["sigma2_ustar"] = np.exp(flat[i]); i += 1
    if layout.shared_classical:
        p["sigma2_u"] = np.exp(flat[i]); i += 1
    p["gamma0"] = flat[i]; i += 1
    p["gamma_z"] = flat[i:i + q]; i += q
    p["sigma2_x"] = np.exp(flat[i]); i += 1
    return p


def _outcome_aux(p, layout):
    if layout.outcome_kind == LINEAR:
        return p["sigma2_y"]
    if layout.outcome_kind == WEIBULL:
        return p["shape"]
    return None


def _meas_params(p, systematic):
    if systematic:
        return p["theta0"], p["theta1"], p["sigma2_ustar"]
    return 0.0, 1.0, p["sigma2_u"]


def _eval_group(x, group: _Group, p, layout, q, want_dx=False, keep_parts=False):
    """Log joint g(x) per (record, node).

    ``want_dx`` adds the first two x-derivatives (mode finding);
    ``keep_parts`` returns the shared intermediates so the parameter
    gradient can be formed afterwards without recomputation.
    """
    kind = layout.outcome_kind
    eta = p["alpha"] + p["beta_x"] * x + (group.Z @ p["beta_z"])[:, None]
    parts: dict = {}

    if kind == LINEAR:
        y = group.y_parts
        resid_y = y - eta
        g = -0.5 * np.log(2.0 * np.pi * p["sigma2_y"]) - resid_y**2 / (2.0 * p["sigma2_y"])
        d1 = resid_y / p["sigma2_y"]
        parts["resid_y"] = resid_y
    elif kind == LOGISTIC:
        y = group.y_parts
        prob = expit_arr(eta)
        g = y * eta - np.logaddexp(0.0, eta)
        d1 = y - prob
        parts["prob"] = prob
    else:
        t, d = group.y_parts
        logt = np.log(t)
        H = t ** p["shape"] * np.exp(eta)
        g = d * (np.log(p["shape"]) + (p["shape"] - 1.0) * logt + eta) - H
        d1 = d - H
        parts["logt"] = logt
        parts["H"] = H

    if want_dx:
        g1 = p["beta_x"] * d1
        if kind == LINEAR:
            g2 = np.full_like(eta, -p["beta_x"] ** 2 / p["sigma2_y"])
        elif kind == LOGISTIC:
            g2 = -p["beta_x"] ** 2 * (prob * (1.0 - prob))
        else:
            g2 = -p["beta_x"] ** 2 * H

    meas_resids = []
    for vals, obs, systematic in group.measures:
        t0, t1, s2 = _meas_params(p, systematic)
        resid = vals - t0 - t1 * x
        g = g + obs * (-0.5 * np.log(2.0 * np.pi * s2) - resid**2 / (2.0 * s2))
        meas_resids.append(resid)
        if want_dx:
            g1 = g1 + obs * (t1 * resid / s2)
            g2 = g2 - obs * (t1**2 / s2)
    mz = (p["gamma0"] + group.Z @ p["gamma_z"])[:, None]
    e = x - mz
    g = g - 0.5 * np.log(2.0 * np.pi * p["sigma2_x"]) - e**2 / (2.0 * p["sigma2_x"])
    if want_dx:
        g1 = g1 - e / p["sigma2_x"]
        g2 = g2 - 1.0 / p["sigma2_x"]
        return g, g1, g2
    if not keep_parts:
        return g
    parts.update({"d1": d1, "meas_resids": meas_resids, "e": e, "x": x})
    return g, parts


def _weighted_param_grad(parts, group: _Group, p, layout, q, w) -> np.ndarray:
    """Fisher-identity gradient: sum over records/nodes of w * dg/dparam."""
    kind = layout.outcome_kind
    d1, x, e = parts["d1"], parts["x"], parts["e"]

    def wsum(a):
        return float(np.sum(w * a))

    grad = []
    if kind == WEIBULL:
        t, d = group.y_parts
        logt, H = parts["logt"], parts["H"]
        grad.append(wsum(d * (1.0 + p["shape"] * logt) - p["shape"] * H * logt))
    grad.append(wsum(d1))                                     # alpha
    grad.append(wsum(d1 * x))                                 # beta_x
    for jz in range(q):
        grad.append(wsum(d1 * group.Z[:, jz][:, None]))
    if kind == LINEAR:
        grad.append(wsum(-0.5 + parts["resid_y"] ** 2 / (2.0 * p["sigma2_y"])))
    if layout.systematic:
        dtheta0 = dtheta1 = dlogs2us = 0.0
        for (vals, obs, systematic), resid in zip(group.measures, parts["meas_resids"]):
            if not systematic:
                continue
            _, t1, s2 = _meas_params(p, True)
            dtheta0 += wsum(obs * resid / s2)
            dtheta1 += wsum(obs * resid * x / s2)
            dlogs2us += wsum(obs * (-0.5 + resid**2 / (2.0 * s2)))
        grad.extend([dtheta0, dtheta1, dlogs2us])
    if layout.shared_classical:
        dlogs2u = 0.0
        for (vals, obs, systematic), resid in zip(group.measures, parts["meas_resids"]):
            if systematic:
                continue
            dlogs2u += wsum(obs * (-0.5 + resid**2 / (2.0 * p["sigma2_u"])))
        grad.append(dlogs2u)
    grad.append(wsum(e / p["sigma2_x"]))                      # gamma0
    for jz in range(q):
        grad.append(wsum(group.Z[:, jz][:, None] * e / p["sigma2_x"]))
    grad.append(wsum(-0.5 + e**2 / (2.0 * p["sigma2_x"])))
    return np.asarray(grad)


def expit_arr(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * eta))


def _find_modes(group: _Group, p, layout, q):
    """Per-record mode and curvature of g(x) (g is strictly concave in x)."""
    prec0 = 1.0 / p["sigma2_x"]
    num = (p["gamma0"] + group.Z @ p["gamma_z"]) / p["sigma2_x"]
    for vals, obs, systematic in group.measures:
        t0, t1, s2 = _meas_params(p, systematic)
        num = num + (obs[:, 0] * t1 * (vals[:, 0] - t0)) / s2
        prec0 = prec0 + obs[:, 0] * t1**2 / s2
    x = (num / prec0)[:, None]
    limit = 5.0 * np.sqrt(p["sigma2_x"])
    g2 = None
    for _ in range(50):
        _, g1, g2 = _eval_group(x, group, p, layout, q, want_dx=True)
        if np.max(np.abs(g1) / np.sqrt(-g2)) < 1e-11:
            break
        x = x + np.clip(g1 / (-g2), -limit, limit)
    return x[:, 0], -g2[:, 0]


def _marginal_loglik(flat, data: _MlData, layout: _Layout, q, quad: QuadratureRule, want_grad: bool):
    p = _unpack(flat, layout, q)
    total = 0.0
    grad = np.zeros(layout.size) if want_grad else None

    if data.latent is not None and data.latent.n:
        group = data.latent
        mode, curv = _find_modes(group, p, layout, q)
        sig = 1.0 / np.sqrt(curv)
        xnodes = mode[:, None] + np.sqrt(2.0) * sig[:, None] * quad.nodes[None, :]
        logw = np.log(quad.weights) + quad.nodes**2
        if want_grad:
            g, parts = _eval_group(xnodes, group, p, layout, q, keep_parts=True)
            logterms = logw[None, :] + g
            m = np.max(logterms, axis=1, keepdims=True)
            w = np.exp(logterms - m)
            tot_w = w.sum(axis=1, keepdims=True)
            total += float(np.sum(np.log(np.sqrt(2.0) * sig) + m[:, 0] + np.log(tot_w[:, 0])))
            grad += _weighted_param_grad(parts, group, p, layout, q, w / tot_w)
        else:
            g = _eval_group(xnodes, group, p, layout, q)
            logterms = logw[None, :] + g
            m = np.max(logterms, axis=1, keepdims=True)
            lse = m[:, 0] + np.log(np.sum(np.exp(logterms - m), axis=1))
            total += float(np.sum(np.log(np.sqrt(2.0) * sig) + lse))

    if data.direct is not None and data.direct.n:
        group = data.direct
        x = group.x_obs[:, None]
        if want_grad:
            g, parts = _eval_group(x, group, p, layout, q, keep_parts=True)
            total += float(np.sum(g))
            grad += _weighted_param_grad(parts, group, p, layout, q, np.ones_like(x))
        else:
            total += float(np.sum(_eval_group(x, group, p, layout, q)))

    return (total, grad) if want_grad else total


# ---------------------------------------------------------------------------
# Public likelihood evaluators

def observed_data_loglik(spec: JointModelSpec, ds: Dataset, K: int = DEFAULT_K) -> float:
    """Observed-data log likelihood at the joint model's parameter values."""
    layout = _build_layout(spec.design, spec.outcome, spec.error)
    data = _prepare(ds, spec.design, spec.outcome, spec.error)
    flat = layout.from_params(spec.params)
    quad = QuadratureRule.gauss_hermite(K)
    return _marginal_loglik(flat, data, layout, len(spec.outcome.covariates), quad, want_grad=False)


def loglik_validation(spec: JointModelSpec, ds: Dataset, K: int = DEFAULT_K) -> float:
    if spec.design.kind != VALIDATION:
        raise UnsupportedConfigError("loglik_validation requires a validation design")
    return observed_data_loglik(spec, ds, K=K)


def loglik_replication(spec: JointModelSpec, ds: Dataset, K: int = DEFAULT_K) -> float:
    if spec.design.kind != REPLICATION:
        raise UnsupportedConfigError("loglik_replication requires a replication design")
    return observed_data_loglik(spec, ds, K=K)


def loglik_gradient(spec: JointModelSpec, ds: Dataset, K: int = DEFAULT_K) -> tuple[float, np.ndarray, tuple[str, ...]]:
    """Log likelihood plus its analytic gradient on the internal scale."""
    layout = _build_layout(spec.design, spec.outcome, spec.error)
    data = _prepare(ds, spec.design, spec.outcome, spec.error)
    flat = layout.from_params(spec.params)
    quad = QuadratureRule.gauss_hermite(K)
    ll, grad = _marginal_loglik(flat, data, layout, len(spec.outcome.covariates), quad, want_grad=True)
    return ll, grad, layout.internal


# ---------------------------------------------------------------------------
# Starting values

def _moment_starts(ds, design, outcome, error, layout, q) -> np.ndarray:
    naive = fit_naive(ds, design, outcome)
    covs = outcome.covariates
    keep = np.ones(ds.n, dtype=bool)
    for c in covs:
        keep &= ~ds.miss(c)

    first = design.role(design.always_observed_measures()[0])
    x1 = ds.vals(first)
    rows = keep & ~np.isnan(x1)
    Zm = np.column_stack([np.ones(int(rows.sum()))] + [ds.vals(c)[rows] for c in covs])
    mean_fit = fit_ols(Zm, x1[rows])
    resid_var = float(mean_fit.metadata["sigma2"])

    if design.kind == REPLICATION:
        x2 = ds.vals(design.role("xstar2"))
        both = rows & ~np.isnan(x2)
        s2u = 0.5 * float(np.var(x1[both] - x2[both], ddof=1))
    elif design.kind == VALIDATION:
        x = ds.vals(design.role("x"))
        r1 = rows & ~np.isnan(x)
        s2u = float(np.mean((x1[r1] - x[r1]) ** 2))
    else:
        if "xstarstar" in design.columns:
            second = [design.role("xstarstar")]
        else:
            second = [design.role("xstarstar1"), design.role("xstarstar2")]
        if len(second) == 2:
            a, b = ds.vals(second[0]), ds.vals(second[1])
            pairs = ~np.isnan(a) & ~np.isnan(b)
            s2u = 0.5 * float(np.var(a[pairs] - b[pairs], ddof=1))
        else:
            s2u = 0.25 * resid_var
    s2u = max(s2u, 1e-4 * max(resid_var, 1e-8))
    s2x = max(resid_var - s2u, 0.25 * resid_var)

    flat = np.zeros(layout.size)
    flat[_idx(layout, "alpha")] = naive.coef("intercept")
    flat[_idx(layout, "beta_x")] = naive.coef(outcome.exposure)
    for c in covs:
        flat[_idx(layout, f"beta_{c}")] = naive.coef(c)
    if outcome.kind == LINEAR:
        flat[_idx(layout, "log_sigma2_y")] = np.log(max(naive.metadata["sigma2"], 1e-8))
    if outcome.kind == WEIBULL:
        flat[_idx(layout, "log_shape")] = np.log(naive.shape)
    if layout.systematic:
        # Start the distortion at identity; the unbiased measures anchor it.
        flat[_idx(layout, "theta0")] = 0.0
        flat[_idx(layout, "theta1")] = 1.0
        flat[_idx(layout, "log_sigma2_ustar")] = np.log(s2u)
    if layout.shared_classical:
        flat[_idx(layout, "log_sigma2_u")] = np.log(s2u)
    flat[_idx(layout, "gamma0")] = mean_fit.beta[0]
    for j, c in enumerate(covs):
        flat[_idx(layout, f"gamma_{c}")] = mean_fit.beta[1 + j]
    flat[_idx(layout, "log_sigma2_x")] = np.log(s2x)
    return flat


def _start_list(flat0: np.ndarray, layout: _Layout, n_starts: int) -> list[np.ndarray]:
    starts = [flat0]
    rc = flat0.copy()
    s2u = np.exp(flat0[_idx(layout, "log_sigma2_u")]) if layout.shared_classical else 0.0
    s2x = np.exp(flat0[_idx(layout, "log_sigma2_x")])
    lam = s2x / (s2x + s2u) if s2x + s2u > 0 else 1.0
    rc[_idx(layout, "beta_x")] = flat0[_idx(layout, "beta_x")] / max(lam, 0.1)
    starts.append(rc)
    g = RngStream(_JITTER_SEED).generator()
    while len(starts) < n_starts:
        jit = flat0 + 0.3 * g.standard_normal(layout.size)
        starts.append(jit)
    return starts[:n_starts]


# ---------------------------------------------------------------------------
# Fitting

def fit_ml(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec,
           error: ErrorModelSpec | None = None, K: int = DEFAULT_K,
           starts: int = 5, fixed: Mapping[str, float] | None = None,
           level: float = 0.95) -> FitResult:
    """Maximize the observed-data likelihood over (beta, theta, gamma).

    Multistart quasi-Newton (naive-based, attenuation-corrected, and jittered
    starts; best optimum kept). ``fixed`` pins reported parameters (e.g.
    ``{"sigma2_u": 1.0}``), which also drives profile likelihood evaluation.
    Covariance is the inverse observed information, reported on the natural
    scale; a sigma2_u estimate at the boundary is flagged in the metadata.
    """
    error = error or ErrorModelSpec(sigma2_u=1.0)
    layout = _build_layout(design, outcome, error)
    data = _prepare(ds, design, outcome, error)
    q = len(outcome.covariates)
    quad = QuadratureRule.gauss_hermite(K)

    fixed = dict(fixed or {})
    fixed_internal: dict[int, float] = {}
    for rname, value in fixed.items():
        j = layout.reported.index(rname)
        fixed_internal[j] = np.log(value) if layout.log_scale[j] else float(value)
    free = np.array([j for j in range(layout.size) if j not in fixed_internal], dtype=int)
    if free.size == 0:
        raise ValueError("no free parameters to optimize")

    def embed(free_vals):
        flat = np.empty(layout.size)
        flat[free] = free_vals
        for j, v in fixed_internal.items():
            flat[j] = v
        return flat

    # Mean-scaled objective keeps BFGS step sizes sane across sample sizes.
    scale = 1.0 / max(data.n_used, 1)

    def negll_grad(free_vals):
        flat = embed(free_vals)
        ll, grad = _marginal_loglik(flat, data, layout, q, quad, want_grad=True)
        if not np.isfinite(ll):
            return 1e12, np.zeros(free.size)
        return -ll * scale, -grad[free] * scale

    flat0 = _moment_starts(ds, design, outcome, error, layout, q)
    best = None
    results = []
    for start in _start_list(flat0, layout, starts):
        try:
            res = optimize.minimize(
                negll_grad, start[free], jac=True, method="BFGS",
                options={"gtol": 1e-5, "maxiter": 200},
            )
        except (FloatingPointError, np.linalg.LinAlgError):
            continue
        results.append((float(res.fun), float(np.max(np.abs(res.jac)))))
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun - 1e-12):
            best = res
    if best is None:
        raise ConvergenceError(f"fit_ml: no start converged ({results})")
    res = optimize.minimize(
        negll_grad, best.x, jac=True, method="BFGS",
        options={"gtol": 1e-9, "maxiter": 500},
    )
    gnorm = float(np.max(np.abs(res.jac)))
    if not (res.success or gnorm < 1e-6):
        raise ConvergenceError(f"fit_ml: polish stage failed (gradient sup-norm {gnorm:.2e})")
    flat_hat = embed(res.x)
    ll_hat = -res.fun / scale

    # Observed information via central differences of the analytic gradient.
    h = 1e-5 * np.maximum(1.0, np.abs(flat_hat))
    info = np.zeros((free.size, free.size))
    for a, j in enumerate(free):
        hi, lo = flat_hat.copy(), flat_hat.copy()
        hi[j] += h[j]
        lo[j] -= h[j]
        _, ghi = _marginal_loglik(hi, data, layout, q, quad, want_grad=True)
        _, glo = _marginal_loglik(lo, data, layout, q, quad, want_grad=True)
        info[a, :] = -(ghi - glo)[free] / (2.0 * h[j])
    info = 0.5 * (info + info.T)
    try:
        cov_internal_free = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError("observed information singular at the optimum") from None

    cov_internal = np.zeros((layout.size, layout.size))
    cov_internal[np.ix_(free, free)] = cov_internal_free
    J = layout.natural_jacobian(flat_hat)
    cov_natural = J @ cov_internal @ J.T
    beta_natural = layout.to_natural(flat_hat)

    metadata = {
        "K": K,
        "n_used": data.n_used,
        "n_dropped": data.n_dropped,
        "n_informative_substudy": data.n_pairs,
        "fixed": fixed,
        "ml_context": {
            "design": design, "outcome": outcome, "error": error, "K": K,
            "flat_hat": flat_hat, "loglik": ll_hat,
        },
        "internal_names": layout.internal,
        "flat_internal": flat_hat,
        "cov_internal": cov_internal,
    }
    if layout.shared_classical:
        s2u_hat = beta_natural[layout.reported.index("sigma2_u")]
        if s2u_hat < 1e-8:
            metadata["sigma2_u_boundary"] = True
    return FitResult(
        names=layout.reported, beta=beta_natural, cov=cov_natural, loglik=ll_hat,
        converged=True, n_iter=int(res.nit), grad_norm=gnorm,
        shape=float(beta_natural[layout.reported.index("shape")]) if outcome.kind == WEIBULL else None,
        method="ml", level=level, metadata=metadata,
    )


def profile_interval(fit: FitResult, ds: Dataset, parameter: str, level: float = 0.95,
                     xtol_scale: float = 1e-7) -> tuple[float, float]:
    """Profile-likelihood interval: endpoints where twice the log-likelihood
    drop equals the chi-square(1) quantile, found by bracketing plus Brent.

    Each profile evaluation re-maximizes over the remaining parameters,
    warm-started from the nearest previously solved point. An endpoint that
    stays inside the interval beyond an 8-SE search range is returned open
    (+-inf) and flagged via the fit metadata.
    """
    ctx = fit.metadata.get("ml_context")
    if ctx is None:
        raise ValueError("fit does not carry ML context; was it produced by fit_ml?")
    if not fit.converged:
        raise ValueError("profile_interval requires a converged fit")
    design, outcome, error, K = ctx["design"], ctx["outcome"], ctx["error"], ctx["K"]
    ll_hat = ctx["loglik"]
    flat_hat = ctx["flat_hat"]
    target = ll_hat - stats.chi2.ppf(level, 1) / 2.0

    layout = _build_layout(design, outcome, error)
    data = _prepare(ds, design, outcome, error)
    q = len(outcome.covariates)
    quad = QuadratureRule.gauss_hermite(K)
    j = layout.reported.index(parameter)
    on_log = layout.log_scale[j]
    hat = float(flat_hat[j])
    se = float(np.sqrt(max(fit.metadata["cov_internal"][j, j], 1e-12)))

    pinned = {j}
    for rname, value in fit.metadata.get("fixed", {}).items():
        k = layout.reported.index(rname)
        pinned.add(k)
    free = np.array([k for k in range(layout.size) if k not in pinned], dtype=int)
    solved: list[tuple[float, np.ndarray]] = [(hat, flat_hat[free].copy())]

    scale = 1.0 / max(data.n_used, 1)

    def profile(c_internal: float) -> float:
        # The constrained surface can carry branches at small n; optimize
        # from the nearest solved point AND from the unconstrained optimum,
        # keeping the better maximum.
        warm = min(solved, key=lambda s: abs(s[0] - c_internal))[1]
        starts_here = [warm]
        if np.max(np.abs(warm - flat_hat[free])) > 1e-12:
            starts_here.append(flat_hat[free])

        def negll_grad(free_vals):
            flat = flat_hat.copy()
            flat[free] = free_vals
            flat[j] = c_internal
            ll, grad = _marginal_loglik(flat, data, layout, q, quad, want_grad=True)
            if not np.isfinite(ll):
                return 1e12, np.zeros(free.size)
            return -ll * scale, -grad[free] * scale

        if free.size == 0:
            flat = flat_hat.copy()
            flat[j] = c_internal
            return _marginal_loglik(flat, data, layout, q, quad, want_grad=False)
        best = None
        for s0 in starts_here:
            res = optimize.minimize(negll_grad, s0, jac=True, method="BFGS",
                                    options={"gtol": 1e-9, "maxiter": 300})
            if best is None or res.fun < best.fun:
                best = res
        solved.append((c_internal, best.x.copy()))
        return -best.fun / scale

    def endpoint(direction: float) -> float:
        prev_c = hat
        for mult in (1.9, 2.6, 3.6, 5.2, 8.0):
            c = hat + direction * mult * se
            if profile(c) < target:
                root = optimize.brentq(
                    lambda v: profile(v) - target, min(prev_c, c), max(prev_c, c),
                    xtol=xtol_scale * max(se, 1e-8), rtol=8.9e-16,
                )
                return float(np.exp(root)) if on_log else float(root)
            prev_c = c
        fit.metadata.setdefault("profile_open_ended", []).append(
            (parameter, "upper" if direction > 0 else "lower")
        )
        return float("inf") * direction

    lo = endpoint(-1.0)
    hi = endpoint(+1.0)
    return (lo, hi)
