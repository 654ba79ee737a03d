"""Known-truth synthetic data generator.

Simulates (X, Z), the outcome under the substantive model, error-prone
measures under the classical or systematic error model, and substudy
selection. Every acceptance test leans on this module as its oracle
backbone, so generation is a pure function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np
from scipy import stats

from .core import (
    CALIBRATION,
    Column,
    Dataset,
    ErrorModelSpec,
    LINEAR,
    LOGISTIC,
    OutcomeSpec,
    REPLICATION,
    RngStream,
    SelectionMechanism,
    StudyDesign,
    VALIDATION,
    WEIBULL,
)
from .exceptions import ConfigError
from .linmod import expit


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to simulate one dataset with known truth."""

    n: int
    design: str = REPLICATION
    outcome: str = LINEAR
    mu_x: float = 0.0
    sigma2_x: float = 1.0
    # Z: binary with P(Z=1)=z_p, or normal(mu_z, sigma2_z); corr_xz is the
    # latent-Gaussian correlation (threshold-induced for binary Z).
    z_kind: str = "normal"
    z_p: float = 0.5
    mu_z: float = 0.0
    sigma2_z: float = 1.0
    corr_xz: float = 0.0
    alpha: float = 0.0
    beta_x: float = 1.0
    beta_z: float = 0.0
    sigma2_y: float = 1.0
    weibull_shape: float = 1.5
    censoring: float = 0.0
    error: ErrorModelSpec = field(default_factory=lambda: ErrorModelSpec(sigma2_u=0.0))
    second_error: ErrorModelSpec | None = None
    n_second: int = 1
    selection: SelectionMechanism = field(default_factory=lambda: SelectionMechanism(kind="mcar", p=0.5))
    z_missing: SelectionMechanism | None = None  # mechanism for MISSING z cells
    z_missing_p: float = 0.0
    xstar1_missing_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma2_x <= 0 or self.sigma2_y <= 0 or (self.z_kind == "normal" and self.sigma2_z <= 0):
            raise ConfigError("variances must be > 0")
        if not abs(self.corr_xz) < 1:
            raise ConfigError("|corr_xz| must be < 1")
        if not 0.0 <= self.censoring < 1.0:
            raise ConfigError("censoring rate must lie in [0, 1)")
        if self.z_kind not in ("normal", "binary"):
            raise ConfigError(f"unknown z_kind {self.z_kind!r}")
        if self.design == CALIBRATION and self.n_second not in (1, 2):
            raise ConfigError("calibration design uses 1 or 2 second-type measures")


@dataclass(frozen=True)
class TruthRecord:
    """The simulated truth: latent exposures plus generating parameters."""

    x_true: np.ndarray
    params: Mapping[str, float]
    seed: int
    config: Mapping

    def to_dict(self) -> dict:
        return {
            "params": {k: float(v) for k, v in self.params.items()},
            "x_true": [float(v) for v in self.x_true],
            "seed": int(self.seed),
            "config": self.config,
        }


def _draw_xz(cfg: SimConfig, g: np.random.Generator):
    x_std = g.standard_normal(cfg.n)
    w = cfg.corr_xz * x_std + np.sqrt(1.0 - cfg.corr_xz**2) * g.standard_normal(cfg.n)
    x = cfg.mu_x + np.sqrt(cfg.sigma2_x) * x_std
    if cfg.z_kind == "binary":
        z = (w > stats.norm.ppf(1.0 - cfg.z_p)).astype(float)
    else:
        z = cfg.mu_z + np.sqrt(cfg.sigma2_z) * w
    return x, z


def _draw_outcome(cfg: SimConfig, x, z, g: np.random.Generator):
    eta = cfg.alpha + cfg.beta_x * x + cfg.beta_z * z
    if cfg.outcome == LINEAR:
        return {"y": eta + np.sqrt(cfg.sigma2_y) * g.standard_normal(cfg.n)}
    if cfg.outcome == LOGISTIC:
        return {"y": (g.uniform(size=cfg.n) < expit(eta)).astype(float)}
    if cfg.outcome == WEIBULL:
        r = cfg.weibull_shape
        latent = (g.exponential(size=cfg.n) * np.exp(-eta)) ** (1.0 / r)
        if cfg.censoring == 0.0:
            return {"t": latent, "d": np.ones(cfg.n)}
        rate = _solve_censoring_rate(latent, cfg.censoring)
        c = g.exponential(scale=1.0 / rate, size=cfg.n)
        return {"t": np.minimum(latent, c), "d": (latent <= c).astype(float)}
    raise ConfigError(f"unknown outcome {cfg.outcome!r}")


def _solve_censoring_rate(latent_times, target):
    """Exponential censoring rate hitting the target fraction in expectation.

    P(censored | T=t) = 1 - exp(-c t); the expected fraction is monotone in
    c, so bisection on the simulated latent times is exact and deterministic.
    """

    def frac(c):
        return float(np.mean(1.0 - np.exp(-c * latent_times)))

    lo, hi = 1e-12, 1.0
    while frac(hi) < target:
        hi *= 2.0
        if hi > 1e12:
            raise ConfigError("cannot reach requested censoring fraction")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _apply_error(x, spec: ErrorModelSpec, g: np.random.Generator):
    return spec.theta0 + spec.theta1 * x + np.sqrt(spec.sigma2_u) * g.standard_normal(len(x))


def _draw_selection(cfg: SimConfig, x, z, outcome_parts, xstar1, g: np.random.Generator,
                    mechanism: SelectionMechanism | None = None):
    sel = mechanism if mechanism is not None else cfg.selection
    if sel.kind == "mcar":
        return (g.uniform(size=cfg.n) < sel.p).astype(int)
    c = dict(sel.coefficients)
    eta = np.full(cfg.n, c.get("intercept", 0.0))
    if "y" in c:
        eta += c["y"] * outcome_parts.get("y", 0.0)
    if "logt" in c and "t" in outcome_parts:
        eta += c["logt"] * np.log(outcome_parts["t"])
    if "d" in c and "d" in outcome_parts:
        eta += c["d"] * outcome_parts["d"]
    if "z" in c:
        eta += c["z"] * z
    if "xstar" in c:
        eta += c["xstar"] * xstar1
    if "x" in c:
        eta += c["x"] * x
    return (g.uniform(size=cfg.n) < expit(eta)).astype(int)


def simulate(cfg: SimConfig) -> tuple[Dataset, StudyDesign, OutcomeSpec, TruthRecord]:
    """Generate one dataset conforming to the declared study design.

    Measurement errors are drawn independently of (X, Y, Z), so the errors
    are non-differential by construction. Returns the dataset, the bound
    design and outcome specs, and the truth record.
    """
    rng = RngStream(cfg.seed)
    g = rng.generator()
    x, z = _draw_xz(cfg, g)
    outcome_parts = _draw_outcome(cfg, x, z, g)

    columns: dict[str, Column] = {}
    second = cfg.second_error or ErrorModelSpec(sigma2_u=cfg.error.sigma2_u)
    if cfg.design == VALIDATION:
        xstar1 = _apply_error(x, cfg.error, g)
        design = StudyDesign(kind=VALIDATION, columns={"x": "x", "xstar": "xstar"})
        measures = {"xstar": xstar1}
    elif cfg.design == REPLICATION:
        xstar1 = _apply_error(x, cfg.error, g)
        xstar2 = _apply_error(x, cfg.error, g)
        design = StudyDesign(kind=REPLICATION, columns={"xstar1": "xstar1", "xstar2": "xstar2"})
        measures = {"xstar1": xstar1, "xstar2": xstar2}
    elif cfg.design == CALIBRATION:
        xstar1 = _apply_error(x, cfg.error, g)
        measures = {"xstar": xstar1}
        if cfg.n_second == 1:
            measures["xstarstar"] = _apply_error(x, second, g)
            design = StudyDesign(kind=CALIBRATION, columns={"xstar": "xstar", "xstarstar": "xstarstar"})
        else:
            measures["xstarstar1"] = _apply_error(x, second, g)
            measures["xstarstar2"] = _apply_error(x, second, g)
            design = StudyDesign(
                kind=CALIBRATION,
                columns={"xstar": "xstar", "xstarstar1": "xstarstar1", "xstarstar2": "xstarstar2"},
            )
    else:
        raise ConfigError(f"unknown design {cfg.design!r}")

    r = _draw_selection(cfg, x, z, outcome_parts, xstar1, g)

    substudy_cols = {design.role(role) for role in design.substudy_measures()}
    for name, values in measures.items():
        missing = np.zeros(cfg.n, dtype=bool)
        if name in substudy_cols:
            missing = r == 0
        columns[name] = Column(values=values, missing=missing)
    if cfg.design == VALIDATION:
        columns["x"] = Column(values=x, missing=(r == 0))

    if cfg.xstar1_missing_p > 0:
        first = design.role(design.always_observed_measures()[0])
        col = columns[first]
        extra = g.uniform(size=cfg.n) < cfg.xstar1_missing_p
        columns[first] = Column(values=col.values, missing=col.missing | extra)

    if cfg.z_missing is not None:
        z_missing = _draw_selection(cfg, x, z, outcome_parts, xstar1, g, mechanism=cfg.z_missing) == 1
    elif cfg.z_missing_p > 0:
        z_missing = g.uniform(size=cfg.n) < cfg.z_missing_p
    else:
        z_missing = np.zeros(cfg.n, dtype=bool)
    columns["z"] = Column(values=z, missing=z_missing, kind="binary" if cfg.z_kind == "binary" else "float")

    if cfg.outcome == WEIBULL:
        columns["t"] = Column.of(outcome_parts["t"], kind="time")
        columns["d"] = Column.of(outcome_parts["d"], kind="binary")
        outcome = OutcomeSpec(kind=WEIBULL, time="t", event="d", covariates=("z",), exposure="x")
    else:
        columns["y"] = Column.of(outcome_parts["y"], kind="binary" if cfg.outcome == LOGISTIC else "float")
        outcome = OutcomeSpec(kind=cfg.outcome, y="y", covariates=("z",), exposure="x")

    ds = Dataset(columns=columns, r=r)
    params = {
        "intercept": cfg.alpha,
        "x": cfg.beta_x,
        "z": cfg.beta_z,
        "sigma2_x": cfg.sigma2_x,
        "sigma2_u": cfg.error.sigma2_u,
        "sigma2_y": cfg.sigma2_y,
    }
    if cfg.outcome == WEIBULL:
        params["shape"] = cfg.weibull_shape
    if cfg.error.kind == "systematic":
        params["theta0"] = cfg.error.theta0
        params["theta1"] = cfg.error.theta1
    truth = TruthRecord(x_true=x, params=params, seed=cfg.seed, config=_config_dict(cfg))
    return ds, design, outcome, truth


def _config_dict(cfg: SimConfig) -> dict:
    raw = asdict(cfg)
    raw["error"] = asdict(cfg.error)
    raw["second_error"] = asdict(cfg.second_error) if cfg.second_error else None
    raw["selection"] = {"kind": cfg.selection.kind, "p": cfg.selection.p,
                        "coefficients": dict(cfg.selection.coefficients)}
    return raw


@dataclass(frozen=True)
class TruthCheck:
    """Per-coefficient bias and interval-coverage summary against truth."""

    names: tuple[str, ...]
    estimates: np.ndarray
    truth: np.ndarray
    bias: np.ndarray
    relative_bias: np.ndarray
    covered: tuple[bool | None, ...]


def truth_check(fit, truth: TruthRecord) -> TruthCheck:
    """Compare a fit (FitResult or anything with names/beta/conf_int) to truth.

    Coefficients are matched by name; parameters the fit does not report are
    skipped. Coverage uses the fit's own interval estimates.
    """
    names = [n for n in fit.names if n in truth.params]
    intervals = fit.conf_int()
    est, tru, bias, rel, cov = [], [], [], [], []
    for name in names:
        b = float(fit.beta[fit.names.index(name)])
        t = float(truth.params[name])
        est.append(b)
        tru.append(t)
        bias.append(b - t)
        rel.append((b - t) / t if t != 0 else np.nan)
        if name in intervals:
            lo, hi = intervals[name]
            cov.append(bool(lo <= t <= hi))
        else:
            cov.append(None)
    return TruthCheck(
        names=tuple(names),
        estimates=np.asarray(est),
        truth=np.asarray(tru),
        bias=np.asarray(bias),
        relative_bias=np.asarray(rel),
        covered=tuple(cov),
    )
