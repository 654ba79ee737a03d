import numpy as np
import pytest
from scipy import stats

from memiss.core import ErrorModelSpec, RngStream, SelectionMechanism, validate_dataset
from memiss.exceptions import ConfigError
from memiss.linmod import FitResult, fit_ols
from memiss.simgen import SimConfig, TruthRecord, simulate, truth_check
from conftest import linear_replication_config


def test_zero_error_measure_equals_truth():
    ds, design, outcome, truth = simulate(linear_replication_config(n=200, seed=1, sigma2_u=0.0))
    assert np.array_equal(ds.vals("xstar1"), truth.x_true)


def test_generated_dataset_conforms_to_declared_design():
    for kind, extra in (("validation", {}), ("replication", {}),
                        ("calibration", {"n_second": 2})):
        cfg = SimConfig(n=150, design=kind, outcome="linear", beta_z=0.5,
                        error=ErrorModelSpec(sigma2_u=0.3),
                        selection=SelectionMechanism(kind="mcar", p=0.4), seed=3, **extra)
        ds, design, outcome, _ = simulate(cfg)
        assert validate_dataset(ds, design, outcome) == []


def test_systematic_identity_matches_classical():
    base = dict(n=20_000, design="replication", outcome="linear", beta_z=0.5,
                selection=SelectionMechanism(kind="mcar", p=0.5))
    a, *_ = simulate(SimConfig(error=ErrorModelSpec(sigma2_u=0.4), seed=11, **base))
    b, *_ = simulate(SimConfig(
        error=ErrorModelSpec(kind="systematic", theta0=0.0, theta1=1.0, sigma2_u=0.4),
        seed=12, **base))
    ks = stats.ks_2samp(a.vals("xstar1"), b.vals("xstar1")).statistic
    assert ks < 0.02


def test_attenuation_factor_on_naive_slope():
    # sigma2_x = sigma2_u = 1: naive slope averages beta_x * 0.5
    slopes = []
    for i in range(500):
        ds, design, outcome, truth = simulate(linear_replication_config(n=500, seed=20_000 + i))
        X = np.column_stack([np.ones(ds.n), ds.vals("xstar1"), ds.vals("z")])
        slopes.append(fit_ols(X, ds.vals("y")).beta[1])
    slopes = np.asarray(slopes)
    mcse = slopes.std(ddof=1) / np.sqrt(len(slopes))
    assert abs(slopes.mean() - 0.5) < 3 * mcse


def test_truth_check_identity_zero_bias():
    ds, design, outcome, truth = simulate(linear_replication_config(n=100, seed=2))
    fit = FitResult(names=("intercept", "x", "z"), beta=[0.0, 1.0, 0.5],
                    cov=np.eye(3), loglik=0.0)
    chk = truth_check(fit, truth)
    assert np.allclose(chk.bias, 0.0)
    assert all(chk.covered)


def test_truth_check_vacuous_interval_covers():
    ds, design, outcome, truth = simulate(linear_replication_config(n=100, seed=2))
    fit = FitResult(names=("x",), beta=[5.0], cov=[[1.0]], loglik=0.0,
                    intervals={"x": (-np.inf, np.inf)})
    chk = truth_check(fit, truth)
    assert chk.covered == (True,)
    assert chk.bias[0] == pytest.approx(4.0)


def test_truth_check_coverage_of_correct_interval():
    # a correct 95% normal interval covers ~95% of the time over 500 reps
    covered = []
    for i in range(500):
        g = RngStream(30_000 + i).generator()
        y = 1.5 + g.standard_normal(40)
        fit = fit_ols(np.ones((40, 1)), y, names=("intercept",))
        truth = TruthRecord(x_true=np.empty(0), params={"intercept": 1.5}, seed=i, config={})
        covered.append(truth_check(fit, truth).covered[0])
    rate = np.mean(covered)
    assert abs(rate - 0.95) <= 0.03


def test_replicate_difference_variance_estimates_sigma2_u():
    cfg = linear_replication_config(n=20_000, seed=9, sigma2_u=0.7, p=1.0)
    ds, *_ = simulate(cfg)
    d = (ds.vals("xstar1") - ds.vals("xstar2")) / np.sqrt(2.0)
    est = d.var(ddof=1)
    se = 0.7 * np.sqrt(2.0 / (ds.n - 1))
    assert abs(est - 0.7) < 3 * se


def test_mcar_selection_fraction():
    ds, *_ = simulate(linear_replication_config(n=10_000, seed=10, p=0.3))
    se = np.sqrt(0.3 * 0.7 / 10_000)
    assert abs(ds.r.mean() - 0.3) < 4 * se


def test_errors_nondifferential_partial_correlation():
    cfg = linear_replication_config(n=50_000, seed=13)
    ds, design, outcome, truth = simulate(cfg)
    u = ds.vals("xstar1") - truth.x_true
    y, x, z = ds.vals("y"), truth.x_true, ds.vals("z")
    W = np.column_stack([np.ones(ds.n), x, z])
    ru = u - W @ ols_solve(W, u)
    ry = y - W @ ols_solve(W, y)
    pcorr = np.corrcoef(ru, ry)[0, 1]
    assert abs(pcorr) < 3.5 / np.sqrt(ds.n)


def ols_solve(X, y):
    return np.linalg.solve(X.T @ X, X.T @ y)


def test_mar_and_mnar_selection_mechanisms():
    cfg = linear_replication_config(n=20_000, seed=14)
    cfg_mar = SimConfig(**{**cfg.__dict__, "selection": SelectionMechanism(
        kind="mar", coefficients={"intercept": -0.5, "y": 1.0})})
    ds, *_ , truth = simulate(cfg_mar)
    y = ds.vals("y")
    # selection must depend on y
    assert y[ds.r == 1].mean() > y[ds.r == 0].mean() + 0.1
    cfg_mnar = SimConfig(**{**cfg.__dict__, "selection": SelectionMechanism(
        kind="mnar", coefficients={"intercept": 0.0, "x": 1.5})})
    ds2, *_ , truth2 = simulate(cfg_mnar)
    assert truth2.x_true[ds2.r == 1].mean() > truth2.x_true[ds2.r == 0].mean() + 0.2


def test_weibull_censoring_rate_is_hit():
    cfg = SimConfig(n=20_000, design="replication", outcome="weibull", beta_x=0.5,
                    beta_z=0.3, weibull_shape=1.5, censoring=0.4,
                    error=ErrorModelSpec(sigma2_u=0.5),
                    selection=SelectionMechanism(kind="mcar", p=0.3), seed=15)
    ds, *_ = simulate(cfg)
    frac_censored = 1.0 - ds.vals("d").mean()
    assert abs(frac_censored - 0.4) < 0.02


def test_mar_missing_covariate_mechanism():
    cfg = SimConfig(n=20_000, design="replication", outcome="linear", beta_x=1.0,
                    z_kind="binary", z_p=0.5,
                    error=ErrorModelSpec(sigma2_u=0.5),
                    selection=SelectionMechanism(kind="mcar", p=0.3),
                    z_missing=SelectionMechanism(kind="mar", coefficients={"intercept": 0.0, "y": 0.8}),
                    seed=16)
    ds, *_ = simulate(cfg)
    miss = ds.miss("z")
    assert 0.3 < miss.mean() < 0.7
    assert ds.vals("y")[miss].mean() > ds.vals("y")[~miss].mean() + 0.1


def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(n=10, sigma2_x=-1.0)
    with pytest.raises(ConfigError):
        SimConfig(n=10, censoring=1.2)
    with pytest.raises(ConfigError):
        SimConfig(n=10, corr_xz=1.0)


def test_simulate_is_pure_function_of_config():
    cfg = linear_replication_config(n=300, seed=77)
    a, *_ = simulate(cfg)
    b, *_ = simulate(cfg)
    for name in a.names:
        assert np.array_equal(a.vals(name), b.vals(name), equal_nan=True)
    assert np.array_equal(a.r, b.r)
