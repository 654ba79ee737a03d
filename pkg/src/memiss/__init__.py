"""Measurement error correction for regression models.

Corrects regression estimates for covariate measurement error across
validation, replication, and calibration study designs, treating the true
exposure as missing data: regression calibration, observed-data maximum
likelihood, direct Bayesian MCMC, and multiple imputation (conditional
normal and substantive-model compatible), plus a known-truth simulation
harness that verifies each method's bias correction.
"""

from .core import (
    Column,
    Dataset,
    ErrorModelSpec,
    OutcomeSpec,
    RngStream,
    SelectionMechanism,
    StudyDesign,
    Violation,
    read_csv,
    validate_dataset,
    write_csv,
)
from .linmod import (
    BootstrapResult,
    FitResult,
    NelsonAalen,
    bootstrap,
    fit_logistic,
    fit_naive,
    fit_ols,
    fit_outcome_model,
    fit_weibull_ph,
    nelson_aalen,
)
from .simgen import SimConfig, TruthRecord, simulate, truth_check
from .regcal import CalibrationModel, conditional_mean, fit_calibration, regression_calibration
from .mle import JointModelSpec, QuadratureRule, fit_ml, loglik_replication, loglik_validation, profile_interval
from .bayes import PosteriorChain, PosteriorSummary, PriorSpec, run_mcmc, summarize_posterior
from .mi import (
    ImputationModel,
    PooledResult,
    SmcPriors,
    impute_replicates_normal,
    impute_smcfcs,
    impute_validation,
    pool_rubin,
    run_mi,
)

__version__ = "0.1.0"
