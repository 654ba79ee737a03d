"""Direct Bayesian correction via Metropolis-within-Gibbs.

Joint model: outcome x measurement x exposure, with a latent true exposure
per record, conjugate Gibbs updates wherever the full conditional is normal
or Gamma (linear outcome coefficients, precisions, exposure model, latent
exposure under a linear outcome), random-walk Metropolis elsewhere
(logistic/Weibull outcome blocks, latent exposure for non-linear outcomes,
missing-covariate-model coefficients). Missing binary covariates are drawn
from their exact Bernoulli full conditionals. Proposal scales adapt during
burn-in only (Robbins-Monro, target 0.44 for scalar blocks and 0.30 for
joint blocks) and are frozen afterwards to preserve detailed balance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from .core import (
    CALIBRATION,
    Dataset,
    LINEAR,
    LOGISTIC,
    OutcomeSpec,
    REPLICATION,
    RngStream,
    StudyDesign,
    VALIDATION,
    WEIBULL,
)
from .exceptions import IdentifiabilityError, McmcStateError, UnsupportedConfigError
from .linmod import (
    expit,
    fit_logistic,
    fit_naive,
    fit_ols,
    linear_logpdf,
    logistic_logpmf,
    weibull_logdensity,
)

SCALAR_TARGET = 0.44
JOINT_TARGET = 0.30


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters, all overridable via config.

    Defaults: Normal(0, 1e4) on regression coefficients, Gamma(0.5, 0.5) on
    precisions, Exponential(0.001) on the Weibull shape, and Normal(0, 1e6)
    on the scaled Weibull coefficients -beta_k/shape.
    """

    coef_var: float = 1e4
    precision_shape: float = 0.5
    precision_rate: float = 0.5
    weibull_shape_rate: float = 0.001
    weibull_scaled_coef_var: float = 1e6

    def __post_init__(self):
        for name in ("coef_var", "precision_shape", "precision_rate",
                     "weibull_shape_rate", "weibull_scaled_coef_var"):
            if getattr(self, name) <= 0:
                raise ValueError(f"prior hyperparameter {name} must be strictly positive")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "PriorSpec":
        return cls(**{k: float(v) for k, v in cfg.items()})


@dataclass
class PosteriorChain:
    """One chain: per-iteration draws (thinning preserves order), latent-x
    draws for tracked records, per-block acceptance rates, and the stream."""

    draws: dict[str, np.ndarray]
    latent: dict[int, np.ndarray]
    acceptance: dict[str, float]
    seed: int
    chain_id: int
    iters: int
    burnin: int
    thin: int
    warnings: list[str] = field(default_factory=list)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.draws)

    def kept(self, name: str) -> np.ndarray:
        """Post-burnin draws of one parameter."""
        return self.draws[name][self.burnin // self.thin:]


class _Sampler:
    """Single-chain state and block updates."""

    def __init__(self, ds: Dataset, design: StudyDesign, outcome: OutcomeSpec,
                 priors: PriorSpec, g: np.random.Generator):
        self.ds = ds
        self.design = design
        self.outcome = outcome
        self.pr = priors
        self.g = g
        self.n = ds.n
        self.covs = tuple(outcome.covariates)
        q = len(self.covs)

        if outcome.kind == WEIBULL:
            self.t = ds.vals(outcome.time)
            self.d = ds.vals(outcome.event)
            self.logt = np.log(self.t)
        else:
            self.y = ds.vals(outcome.y)

        # measures: (values, observed mask, systematic flag)
        self.measures = []
        if design.kind == VALIDATION:
            self.measures.append((ds.vals(design.role("xstar")), ~ds.miss(design.role("xstar")), False))
            self.x_fixed = ~ds.miss(design.role("x"))
            self.x_obs_values = ds.vals(design.role("x"))
            if self.x_fixed.sum() < 2:
                raise IdentifiabilityError("validation MCMC needs >= 2 rows with the true exposure")
        else:
            self.x_fixed = np.zeros(self.n, dtype=bool)
            self.x_obs_values = np.full(self.n, np.nan)
            if design.kind == REPLICATION:
                for role in ("xstar1", "xstar2"):
                    c = design.role(role)
                    self.measures.append((ds.vals(c), ~ds.miss(c), False))
                pairs = self.measures[0][1] & self.measures[1][1]
                if pairs.sum() < 2:
                    raise IdentifiabilityError("replication MCMC needs >= 2 replicate pairs")
            elif design.kind == CALIBRATION:
                self.measures.append((ds.vals(design.role("xstar")), ~ds.miss(design.role("xstar")), True))
                second = [design.role("xstarstar")] if "xstarstar" in design.columns else \
                    [design.role("xstarstar1"), design.role("xstarstar2")]
                for c in second:
                    self.measures.append((ds.vals(c), ~ds.miss(c), False))
            else:
                raise UnsupportedConfigError(f"unknown design {design.kind!r}")
        self.systematic = any(s for _, _, s in self.measures)
        self.has_classical = any(not s for _, _, s in self.measures)
        self.measures = [(np.where(obs, v, 0.0), obs, s) for v, obs, s in self.measures]

        # covariates, with missing binary cells to impute
        self.Z = np.column_stack([ds.vals(c) for c in self.covs]) if q else np.empty((self.n, 0))
        self.miss_covs = [c for c in self.covs if ds.miss(c).any()]
        for c in self.miss_covs:
            vals = ds.column(c).observed_values()
            if not np.isin(vals, (0.0, 1.0)).all():
                raise UnsupportedConfigError(
                    f"only binary covariates with missing cells are supported, not {c!r}")
        self.complete_covs = [c for c in self.covs if c not in self.miss_covs]
        self.zmiss = {c: ds.miss(c) for c in self.miss_covs}
        self.Wc = np.column_stack([np.ones(self.n)] + [ds.vals(c) for c in self.complete_covs])

        self._initialize()

    # -- initialization ----------------------------------------------------

    def _initialize(self):
        g, n, q = self.g, self.n, len(self.covs)
        for c in self.miss_covs:
            j = self.covs.index(c)
            prev = float(np.mean(self.ds.column(c).observed_values()))
            rows = self.zmiss[c]
            self.Z[rows, j] = (g.uniform(size=int(rows.sum())) < prev).astype(float)

        vals = np.stack([v for v, _, _ in self.measures])
        obs = np.stack([o for _, o, _ in self.measures])
        with np.errstate(invalid="ignore"):
            xbar = np.where(obs.any(0), vals.sum(0) / np.maximum(obs.sum(0), 1), 0.0)
        self.x = np.where(self.x_fixed, self.x_obs_values, xbar)

        W = np.column_stack([np.ones(n), self.Z])
        efit = fit_ols(W, self.x)
        self.gamma = efit.beta.copy()
        self.sigma2_x = max(float(efit.metadata["sigma2"]), 1e-6)
        self.sigma2_u = max(0.25 * self.sigma2_x, 1e-6)
        if self.systematic:
            self.theta = np.array([0.0, 1.0])
            self.sigma2_ustar = self.sigma2_u

        naive = fit_naive(self.ds, self.design, self.outcome)
        if self.outcome.kind == LINEAR:
            self.beta = naive.beta.copy()
            self.sigma2_y = max(float(naive.metadata["sigma2"]), 1e-6)
            # static observation-pattern groups over latent rows
            free = ~self.x_fixed
            pattern_key = np.zeros(self.n, dtype=int)
            for j, (_, obs, _) in enumerate(self.measures):
                pattern_key += obs.astype(int) << j
            self.patterns = []
            for key in np.unique(pattern_key[free]):
                rows = free & (pattern_key == key)
                flags = [(key >> j) & 1 == 1 for j in range(len(self.measures))]
                self.patterns.append((np.flatnonzero(rows), flags))
            self.direct_rows = np.flatnonzero(self.x_fixed)
            # initial proposal shape for the marginal structural block;
            # Haario adaptation refines it during burn-in
            k = len(self.beta)
            q = len(self.covs)
            diag = list(np.clip(np.diag(naive.cov) * 4.0, 1e-8, None)) + [2.0 / self.n]
            diag += [self.sigma2_x / self.n] * (1 + q) + [2.0 / self.n]
            if self.has_classical:
                diag += [4.0 / max(self.n, 4)]
            if self.systematic:
                diag += [self.sigma2_ustar / self.n, 1.0 / self.n, 4.0 / max(self.n, 4)]
            self.beta_prop_chol = np.diag(np.sqrt(np.asarray(diag)))
            self.beta_step = 1.0
        elif self.outcome.kind == LOGISTIC:
            self.beta = naive.beta.copy()
            self.beta_prop_chol = np.linalg.cholesky(naive.cov + 1e-10 * np.eye(len(naive.beta)))
            self.beta_step = 1.0
        else:
            self.shape = naive.shape
            self.beta = naive.beta.copy()
            cov_full = naive.metadata["cov_full"]
            J = np.zeros((len(self.beta) + 1,) * 2)
            J[0, 0] = 1.0
            J[1:, 0] = self.beta / self.shape
            J[1:, 1:] = -np.eye(len(self.beta)) / self.shape
            cov_u = J @ cov_full @ J.T
            self.beta_prop_chol = np.linalg.cholesky(cov_u + 1e-10 * np.eye(cov_u.shape[0]))
            self.beta_step = 1.0

        self.x_step = np.full(n, 0.5 * np.sqrt(self.sigma2_x))
        self.psi = {}
        self.psi_prop_chol = {}
        self.psi_step = {}
        for c in self.miss_covs:
            j = self.covs.index(c)
            rows = ~self.zmiss[c]
            pfit = fit_logistic(self.Wc[rows], self.Z[rows, j])
            self.psi[c] = pfit.beta.copy()
            self.psi_prop_chol[c] = np.linalg.cholesky(pfit.cov + 1e-10 * np.eye(len(pfit.beta)))
            self.psi_step[c] = 1.0

        self.acc = {}
        self.tot = {}

    # -- likelihood pieces --------------------------------------------------

    def _eta(self, x=None, Z=None):
        x = self.x if x is None else x
        Z = self.Z if Z is None else Z
        return self.beta[0] + self.beta[1] * x + Z @ self.beta[2:]

    def _outcome_loglik_vec(self, x=None, Z=None):
        eta = self._eta(x, Z)
        if self.outcome.kind == LINEAR:
            return linear_logpdf(self.y, eta, self.sigma2_y)
        if self.outcome.kind == LOGISTIC:
            return logistic_logpmf(self.y, eta)
        return weibull_logdensity(self.t, self.d, eta, self.shape)

    def _meas_loglik_vec(self, x):
        out = np.zeros_like(x)
        for vals, obs, systematic in self.measures:
            if systematic:
                resid = vals - self.theta[0] - self.theta[1] * x
                out += obs * (-(resid**2) / (2.0 * self.sigma2_ustar))
            else:
                out += obs * (-((vals - x) ** 2) / (2.0 * self.sigma2_u))
        return out

    def _expo_loglik_vec(self, x, Z=None):
        Z = self.Z if Z is None else Z
        mz = self.gamma[0] + Z @ self.gamma[1:]
        return -((x - mz) ** 2) / (2.0 * self.sigma2_x)

    # -- block updates ------------------------------------------------------

    def _count(self, key, accepted, total):
        self.acc[key] = self.acc.get(key, 0) + accepted
        self.tot[key] = self.tot.get(key, 0) + total

    def update_latent_x(self, it, adapting):
        free = ~self.x_fixed
        if not free.any():
            return
        if self.outcome.kind == LINEAR:
            prec = 1.0 / self.sigma2_x + self.beta[1] ** 2 / self.sigma2_y
            num = (self.gamma[0] + self.Z @ self.gamma[1:]) / self.sigma2_x
            num = num + self.beta[1] * (self.y - self.beta[0] - self.Z @ self.beta[2:]) / self.sigma2_y
            prec = np.full(self.n, prec)
            for vals, obs, systematic in self.measures:
                if systematic:
                    prec += obs * self.theta[1] ** 2 / self.sigma2_ustar
                    num += obs * self.theta[1] * (vals - self.theta[0]) / self.sigma2_ustar
                else:
                    prec += obs / self.sigma2_u
                    num += obs * vals / self.sigma2_u
            mean = num / prec
            draw = mean + self.g.standard_normal(self.n) / np.sqrt(prec)
            self.x = np.where(free, draw, self.x)
            if not np.isfinite(self.x).all():
                raise McmcStateError("latent-x Gibbs produced non-finite values", state=self.state_dump(it))
            return
        # random-walk Metropolis per record
        prop = self.x + self.x_step * self.g.standard_normal(self.n)
        cur_lp = self._outcome_loglik_vec() + self._meas_loglik_vec(self.x) + self._expo_loglik_vec(self.x)
        new_lp = self._outcome_loglik_vec(prop) + self._meas_loglik_vec(prop) + self._expo_loglik_vec(prop)
        if not (np.isfinite(cur_lp[free]).all() and np.isfinite(new_lp[free]).all()):
            raise McmcStateError("latent-x Metropolis produced non-finite log density",
                                 state=self.state_dump(it))
        accept = (np.log(self.g.uniform(size=self.n)) < new_lp - cur_lp) & free
        self.x = np.where(accept, prop, self.x)
        self._count("latent_x", int(accept[free].sum()), int(free.sum()))
        if adapting:
            lr = (it + 1) ** -0.6
            self.x_step[free] *= np.exp(lr * (accept[free].astype(float) - SCALAR_TARGET))

    def update_exposure_model(self):
        W = np.column_stack([np.ones(self.n), self.Z])
        prec = W.T @ W / self.sigma2_x + np.eye(W.shape[1]) / self.pr.coef_var
        mean = np.linalg.solve(prec, W.T @ self.x / self.sigma2_x)
        L = np.linalg.cholesky(np.linalg.inv(prec))
        self.gamma = mean + L @ self.g.standard_normal(W.shape[1])
        resid = self.x - W @ self.gamma
        self.sigma2_x = 1.0 / self.g.gamma(
            self.pr.precision_shape + 0.5 * self.n,
            1.0 / (self.pr.precision_rate + 0.5 * float(resid @ resid)),
        )

    def update_measurement(self):
        if self.has_classical:
            sse = 0.0
            count = 0.0
            for vals, obs, systematic in self.measures:
                if systematic:
                    continue
                sse += float(np.sum(obs * (vals - self.x) ** 2))
                count += float(obs.sum())
            self.sigma2_u = 1.0 / self.g.gamma(
                self.pr.precision_shape + 0.5 * count,
                1.0 / (self.pr.precision_rate + 0.5 * sse),
            )
        if self.systematic:
            for vals, obs, systematic in self.measures:
                if not systematic:
                    continue
                rows = obs
                W = np.column_stack([np.ones(int(rows.sum())), self.x[rows]])
                v = vals[rows]
                prec = W.T @ W / self.sigma2_ustar + np.eye(2) / self.pr.coef_var
                mean = np.linalg.solve(prec, W.T @ v / self.sigma2_ustar)
                L = np.linalg.cholesky(np.linalg.inv(prec))
                self.theta = mean + L @ self.g.standard_normal(2)
                resid = v - W @ self.theta
                self.sigma2_ustar = 1.0 / self.g.gamma(
                    self.pr.precision_shape + 0.5 * len(v),
                    1.0 / (self.pr.precision_rate + 0.5 * float(resid @ resid)),
                )

    def _structural_vector(self) -> np.ndarray:
        parts = [self.beta, [np.log(self.sigma2_y)], self.gamma, [np.log(self.sigma2_x)]]
        if self.has_classical:
            parts.append([np.log(self.sigma2_u)])
        if self.systematic:
            parts.append([self.theta[0], self.theta[1], np.log(self.sigma2_ustar)])
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])

    def _set_structural_vector(self, vec: np.ndarray):
        k = len(self.beta)
        q = len(self.covs)
        i = 0
        self.beta = vec[i:i + k].copy(); i += k
        self.sigma2_y = float(np.exp(vec[i])); i += 1
        self.gamma = vec[i:i + 1 + q].copy(); i += 1 + q
        self.sigma2_x = float(np.exp(vec[i])); i += 1
        if self.has_classical:
            self.sigma2_u = float(np.exp(vec[i])); i += 1
        if self.systematic:
            self.theta = vec[i:i + 2].copy()
            self.sigma2_ustar = float(np.exp(vec[i + 2]))

    def _structural_logpost(self, vec: np.ndarray) -> float:
        """Joint log posterior of all structural parameters with the latent
        exposure integrated out (linear outcome only).

        Per observation pattern, (y, observed measures) given Z is
        multivariate normal in closed form; validation rows with X observed
        contribute their three factors directly. Overflow in wild proposals
        yields -inf (rejected) rather than a warning.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            out = self._structural_logpost_inner(vec)
        return out if np.isfinite(out) else -np.inf

    def _structural_logpost_inner(self, vec: np.ndarray) -> float:
        k = len(self.beta)
        q = len(self.covs)
        i = 0
        coefs = vec[i:i + k]; i += k
        log_s2y = vec[i]; s2y = float(np.exp(log_s2y)); i += 1
        gamma = vec[i:i + 1 + q]; i += 1 + q
        log_s2x = vec[i]; s2x = float(np.exp(log_s2x)); i += 1
        if self.has_classical:
            log_s2u = vec[i]; s2u = float(np.exp(log_s2u)); i += 1
        if self.systematic:
            theta = vec[i:i + 2]
            log_s2us = vec[i + 2]; s2us = float(np.exp(log_s2us))

        alpha, beta_x, beta_z = coefs[0], coefs[1], coefs[2:]
        mz = gamma[0] + self.Z @ gamma[1:]
        mu_y = alpha + beta_x * mz + self.Z @ beta_z
        total = 0.0
        for rows, flags in self.patterns:
            comps = [(self.y[rows] - mu_y[rows])]
            load = [beta_x]
            noise = [s2y]
            for (vals, obs, systematic), present in zip(self.measures, flags):
                if not present:
                    continue
                if systematic:
                    comps.append(vals[rows] - theta[0] - theta[1] * mz[rows])
                    load.append(theta[1])
                    noise.append(s2us)
                else:
                    comps.append(vals[rows] - mz[rows])
                    load.append(1.0)
                    noise.append(s2u)
            # cov = s2x * load load' + diag(noise): Sherman-Morrison keeps the
            # whole evaluation in cheap vector arithmetic
            load = np.asarray(load)
            noise = np.asarray(noise)
            ld = load / noise
            kappa = 1.0 + s2x * float(load @ ld)
            logdet = float(np.sum(np.log(noise))) + np.log(kappa)
            quad = 0.0
            proj = np.zeros(len(rows))
            for rcomp, dinv, lcomp in zip(comps, 1.0 / noise, ld):
                quad += float(rcomp @ rcomp) * dinv
                proj += rcomp * lcomp
            quad -= (s2x / kappa) * float(proj @ proj)
            total += -0.5 * (len(rows) * (len(load) * np.log(2.0 * np.pi) + logdet) + quad)
        if self.direct_rows.size:
            rows = self.direct_rows
            xr = self.x[rows]
            eta = alpha + beta_x * xr + self.Z[rows] @ beta_z
            total += float(np.sum(linear_logpdf(self.y[rows], eta, s2y)))
            total += float(np.sum(linear_logpdf(xr, mz[rows], s2x)))
            for vals, obs, systematic in self.measures:
                o = obs[rows]
                if systematic:
                    total += float(np.sum(o * linear_logpdf(vals[rows], theta[0] + theta[1] * xr, s2us)))
                else:
                    total += float(np.sum(o * linear_logpdf(vals[rows], xr, s2u)))
        # priors: normal on coefficients, Gamma on each precision (log scale)
        total -= float(coefs @ coefs) / (2.0 * self.pr.coef_var)
        total -= float(gamma @ gamma) / (2.0 * self.pr.coef_var)
        a0, b0 = self.pr.precision_shape, self.pr.precision_rate
        total += -a0 * log_s2y - b0 / s2y
        total += -a0 * log_s2x - b0 / s2x
        if self.has_classical:
            total += -a0 * log_s2u - b0 / s2u
        if self.systematic:
            total -= float(theta @ theta) / (2.0 * self.pr.coef_var)
            total += -a0 * log_s2us - b0 / s2us
        return total

    def _adapt_structural_cov(self, it: int):
        """Haario-style proposal covariance from burn-in draws, refreshed
        periodically; frozen once adaptation ends."""
        vec = self._structural_vector()
        if not hasattr(self, "_adapt_sum"):
            d = len(vec)
            self._adapt_sum = np.zeros(d)
            self._adapt_outer = np.zeros((d, d))
            self._adapt_n = 0
        self._adapt_sum += vec
        self._adapt_outer += np.outer(vec, vec)
        self._adapt_n += 1
        if self._adapt_n >= 200 and self._adapt_n % 100 == 0:
            n = self._adapt_n
            mean = self._adapt_sum / n
            cov = self._adapt_outer / n - np.outer(mean, mean)
            d = len(vec)
            cov = cov * (2.38**2 / d) + 1e-9 * np.eye(d)
            try:
                self.beta_prop_chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass

    def update_outcome(self, it, adapting):
        if self.outcome.kind == LINEAR:
            per_sweep = 3
            cur = self._structural_vector()
            lp_cur = self._structural_logpost(cur)
            if not np.isfinite(lp_cur):
                raise McmcStateError("outcome block log posterior non-finite", state=self.state_dump(it))
            for rep in range(per_sweep):
                prop = cur + self.beta_step * (self.beta_prop_chol @ self.g.standard_normal(len(cur)))
                lp_new = self._structural_logpost(prop)
                ok = np.isfinite(lp_new) and np.log(self.g.uniform()) < lp_new - lp_cur
                if ok:
                    cur, lp_cur = prop, lp_new
                self._count("outcome", int(ok), 1)
                if adapting:
                    self.beta_step *= np.exp((it + 1) ** -0.6 * (float(ok) - JOINT_TARGET))
            self._set_structural_vector(cur)
            if adapting:
                self._adapt_structural_cov(it)
            return
        if self.outcome.kind == LOGISTIC:
            cur = self.beta
            prop = cur + self.beta_step * (self.beta_prop_chol @ self.g.standard_normal(len(cur)))

            def logpost(b):
                eta = b[0] + b[1] * self.x + self.Z @ b[2:]
                return float(np.sum(logistic_logpmf(self.y, eta))) - float(b @ b) / (2.0 * self.pr.coef_var)

            lp_cur, lp_new = logpost(cur), logpost(prop)
            if not (np.isfinite(lp_cur) and np.isfinite(lp_new)):
                raise McmcStateError("outcome block log posterior non-finite", state=self.state_dump(it))
            ok = np.log(self.g.uniform()) < lp_new - lp_cur
            if ok:
                self.beta = prop
            self._count("outcome", int(ok), 1)
            if adapting:
                self.beta_step *= np.exp((it + 1) ** -0.6 * (float(ok) - JOINT_TARGET))
            return
        # Weibull: joint update of (log shape, scaled coefficients -beta/r)
        u_cur = np.concatenate([[np.log(self.shape)], -self.beta / self.shape])
        prop = u_cur + self.beta_step * (self.beta_prop_chol @ self.g.standard_normal(len(u_cur)))

        def logpost_u(u):
            r = float(np.exp(u[0]))
            beta = -u[1:] * r
            eta = beta[0] + beta[1] * self.x + self.Z @ beta[2:]
            ll = float(np.sum(weibull_logdensity(self.t, self.d, eta, r)))
            lp = -self.pr.weibull_shape_rate * r + u[0]          # Exp prior on r, log-scale Jacobian
            lp -= float(u[1:] @ u[1:]) / (2.0 * self.pr.weibull_scaled_coef_var)
            return ll + lp

        lp_cur, lp_new = logpost_u(u_cur), logpost_u(prop)
        if not np.isfinite(lp_cur):
            raise McmcStateError("Weibull block log posterior non-finite", state=self.state_dump(it))
        ok = np.isfinite(lp_new) and np.log(self.g.uniform()) < lp_new - lp_cur
        if ok:
            self.shape = float(np.exp(prop[0]))
            self.beta = -prop[1:] * self.shape
        self._count("outcome", int(ok), 1)
        if adapting:
            self.beta_step *= np.exp((it + 1) ** -0.6 * (float(ok) - JOINT_TARGET))

    def update_missing_covariates(self, it, adapting):
        for c in self.miss_covs:
            j = self.covs.index(c)
            rows = np.flatnonzero(self.zmiss[c])
            # psi block first: logistic model on currently completed data
            cur = self.psi[c]
            prop = cur + self.psi_step[c] * (self.psi_prop_chol[c] @ self.g.standard_normal(len(cur)))
            zj = self.Z[:, j]

            def logpost(p):
                eta = self.Wc @ p
                return float(np.sum(logistic_logpmf(zj, eta))) - float(p @ p) / (2.0 * self.pr.coef_var)

            lp_cur, lp_new = logpost(cur), logpost(prop)
            ok = np.log(self.g.uniform()) < lp_new - lp_cur
            if ok:
                self.psi[c] = prop
            self._count(f"psi_{c}", int(ok), 1)
            if adapting:
                self.psi_step[c] *= np.exp((it + 1) ** -0.6 * (float(ok) - JOINT_TARGET))

            # exact Bernoulli conditional for the missing cells
            Z1 = self.Z[rows].copy(); Z1[:, j] = 1.0
            Z0 = self.Z[rows].copy(); Z0[:, j] = 0.0
            logodds = self.Wc[rows] @ self.psi[c]
            lo1 = self._outcome_loglik_rows(rows, Z1) + self._expo_rows(rows, Z1)
            lo0 = self._outcome_loglik_rows(rows, Z0) + self._expo_rows(rows, Z0)
            logodds += lo1 - lo0
            if not np.isfinite(logodds).all():
                raise McmcStateError("missing-covariate conditional non-finite", state=self.state_dump(it))
            self.Z[rows, j] = (self.g.uniform(size=rows.size) < expit(logodds)).astype(float)

    def _outcome_loglik_rows(self, rows, Zrows):
        eta = self.beta[0] + self.beta[1] * self.x[rows] + Zrows @ self.beta[2:]
        if self.outcome.kind == LINEAR:
            return linear_logpdf(self.y[rows], eta, self.sigma2_y)
        if self.outcome.kind == LOGISTIC:
            return logistic_logpmf(self.y[rows], eta)
        return weibull_logdensity(self.t[rows], self.d[rows], eta, self.shape)

    def _expo_rows(self, rows, Zrows):
        mz = self.gamma[0] + Zrows @ self.gamma[1:]
        return -((self.x[rows] - mz) ** 2) / (2.0 * self.sigma2_x)

    # -- bookkeeping ---------------------------------------------------------

    def param_values(self) -> dict[str, float]:
        out = {"intercept": self.beta[0], self.outcome.exposure: self.beta[1]}
        for j, c in enumerate(self.covs):
            out[c] = self.beta[2 + j]
        if self.outcome.kind == LINEAR:
            out["sigma2_y"] = self.sigma2_y
        if self.outcome.kind == WEIBULL:
            out["shape"] = self.shape
        if self.has_classical:
            out["sigma2_u"] = self.sigma2_u
        if self.systematic:
            out["theta0"], out["theta1"] = self.theta
            out["sigma2_ustar"] = self.sigma2_ustar
        out["gamma_intercept"] = self.gamma[0]
        for j, c in enumerate(self.covs):
            out[f"gamma_{c}"] = self.gamma[1 + j]
        out["sigma2_x"] = self.sigma2_x
        for c in self.miss_covs:
            for k, term in enumerate(["intercept"] + list(self.complete_covs)):
                out[f"psi_{c}_{term}"] = self.psi[c][k]
        return {k: float(v) for k, v in out.items()}

    def state_dump(self, it: int) -> dict:
        dump = self.param_values()
        dump["iteration"] = it
        dump["x_summary"] = {
            "mean": float(np.mean(self.x)), "min": float(np.min(self.x)), "max": float(np.max(self.x)),
        }
        return dump


def run_mcmc(ds: Dataset, design: StudyDesign, outcome: OutcomeSpec,
             priors: PriorSpec | None = None, chains: int = 4, iters: int = 10_000,
             burnin: int = 5_000, rng: RngStream | None = None, thin: int = 1,
             track_latent: Sequence[int] = ()) -> list[PosteriorChain]:
    """Run Metropolis-within-Gibbs chains on independent random streams.

    Selection into the substudy is assumed MCAR/MAR, so no model for the r
    indicator enters the posterior. ``track_latent`` names record indices
    whose latent exposure draws are stored alongside the parameters.
    """
    if burnin >= iters:
        raise ValueError("burnin must be smaller than iters")
    priors = priors or PriorSpec()
    rng = rng or RngStream(0)
    out = []
    for c in range(chains):
        g = rng.split(c).generator()
        s = _Sampler(ds, design, outcome, priors, g)
        names = list(s.param_values())
        kept = iters // thin
        draws = {name: np.empty(kept) for name in names}
        latent = {int(i): np.empty(kept) for i in track_latent}
        k = 0
        for it in range(iters):
            adapting = it < burnin
            if outcome.kind == LINEAR:
                # collapsed outcome move first, then reinstate X | everything
                s.update_outcome(it, adapting)
                s.update_latent_x(it, adapting)
            else:
                s.update_latent_x(it, adapting)
                s.update_outcome(it, adapting)
            s.update_exposure_model()
            s.update_measurement()
            s.update_missing_covariates(it, adapting)
            if it % thin == 0 and k < kept:
                vals = s.param_values()
                for name in names:
                    draws[name][k] = vals[name]
                for i in latent:
                    latent[i][k] = s.x[i]
                k += 1
        acceptance = {key: s.acc[key] / max(s.tot[key], 1) for key in s.acc}
        warnings_list = []
        for key, rate in acceptance.items():
            if not 0.1 <= rate <= 0.6:
                warnings_list.append(
                    f"acceptance rate {rate:.2f} for block {key} outside [0.1, 0.6] after adaptation")
        out.append(PosteriorChain(
            draws=draws, latent=latent, acceptance=acceptance, seed=rng.seed,
            chain_id=c, iters=iters, burnin=burnin, thin=thin, warnings=warnings_list,
        ))
    return out


# ---------------------------------------------------------------------------
# Summaries

def _split_rhat(seqs: list[np.ndarray]) -> float:
    halves = []
    for s in seqs:
        h = len(s) // 2
        if h >= 2:
            halves.extend([s[:h], s[h:2 * h]])
    if len(halves) < 2:
        return 1.0
    m = len(halves)
    n = len(halves[0])
    means = np.array([h.mean() for h in halves])
    vars_ = np.array([h.var(ddof=1) for h in halves])
    W = vars_.mean()
    B = n * means.var(ddof=1)
    if W <= 0:
        return 1.0
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _ess(seqs: list[np.ndarray]) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    total = 0.0
    for s in seqs:
        n = len(s)
        c = s - s.mean()
        if np.allclose(c, 0):
            total += n
            continue
        f = np.fft.rfft(np.concatenate([c, np.zeros(n)]))
        acov = np.fft.irfft(f * np.conj(f))[:n].real / n
        rho = acov / acov[0]
        tau = 1.0
        k = 1
        while k + 1 < min(n, 1000):
            pair = rho[k] + rho[k + 1]
            if pair < 0:
                break
            tau += 2.0 * pair
            k += 2
        total += n / tau
    return float(total)


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior means, SDs, equal-tailed credible intervals, and
    convergence diagnostics; quacks like a FitResult for reporting."""

    names: tuple[str, ...]
    beta: np.ndarray
    sd: np.ndarray
    intervals: Mapping[str, tuple[float, float]]
    rhat: Mapping[str, float]
    ess: Mapping[str, float]
    level: float
    flags: tuple[str, ...]
    method: str = "bayes"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.sd**2)

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def se(self) -> np.ndarray:
        return self.sd

    def conf_int(self, level: float | None = None) -> dict[str, tuple[float, float]]:
        return dict(self.intervals)


def summarize_posterior(chains: Sequence[PosteriorChain], level: float = 0.95) -> PosteriorSummary:
    """Pool post-burnin draws across chains: posterior means, SDs,
    equal-tailed credible intervals, split-chain R-hat, and effective sample
    size. R-hat above 1.1 produces a prominent non-convergence flag (the
    summary is still returned)."""
    if not chains:
        raise ValueError("summarize_posterior needs at least one chain")
    names = chains[0].names
    alpha = (1.0 - level) / 2.0
    means, sds = [], []
    intervals, rhats, esss = {}, {}, {}
    flags = []
    for name in names:
        seqs = [ch.kept(name) for ch in chains]
        pooled = np.concatenate(seqs)
        means.append(pooled.mean())
        if len(pooled) < 2 or np.ptp(pooled) == 0.0:
            sds.append(0.0)
        else:
            sds.append(pooled.std(ddof=1))
        intervals[name] = (float(np.quantile(pooled, alpha)), float(np.quantile(pooled, 1.0 - alpha)))
        rhats[name] = _split_rhat(seqs)
        esss[name] = _ess(seqs)
        if rhats[name] > 1.1:
            flags.append(f"NON-CONVERGENCE: rhat {rhats[name]:.3f} for {name} exceeds 1.1")
    for ch in chains:
        flags.extend(ch.warnings)
    return PosteriorSummary(
        names=names, beta=np.array(means), sd=np.array(sds), intervals=intervals,
        rhat=rhats, ess=esss, level=level, flags=tuple(flags),
        metadata={"chains": len(chains), "iters": chains[0].iters, "burnin": chains[0].burnin},
    )
