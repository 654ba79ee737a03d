"""Command-line surface: validate, simulate, correct, compare.

Exit codes are a stable contract: 0 success, 1 method failure, 2 config or
data error. Reports are written as JSON + aligned text + CSV, with a forest
figure (and trace plots for Bayesian runs) rendered alongside. The output
directory comes from --out or the MEMISS_OUT environment variable.
"""

from __future__ import annotations

import csv as _csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import bayes as bayes_mod
from . import mi as mi_mod
from . import mle as mle_mod
from .core import (
    Dataset,
    ErrorModelSpec,
    RngStream,
    SelectionMechanism,
    design_from_config,
    error_model_from_config,
    load_config,
    outcome_from_config,
    read_csv,
    validate_dataset,
    write_csv,
)
from .exceptions import ConfigError, MemissError
from .figures import save_forest, save_traces
from .linmod import fit_naive
from .regcal import regression_calibration
from .report import build_report, error_entry, render_csv, render_json, render_text, result_entry
from .simgen import SimConfig, simulate

EXIT_OK = 0
EXIT_METHOD = 1
EXIT_CONFIG = 2

METHODS = ("naive", "rc", "ml", "bayes", "mi")


def _out_dir(out) -> Path:
    path = Path(out or os.environ.get("MEMISS_OUT", "."))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_bundle(config_path, data_path):
    if not config_path:
        raise ConfigError("a --config file with role bindings is required")
    cfg = load_config(config_path)
    for key in ("design", "outcome"):
        if key not in cfg:
            raise ConfigError(f"config missing required section {key!r}")
    design = design_from_config(cfg["design"])
    outcome = outcome_from_config(cfg["outcome"])
    error = error_model_from_config(cfg.get("error_model", {}))
    ds = read_csv(data_path, kinds=cfg.get("kinds"))
    missing = [c for c in list(design.columns.values()) + list(outcome.outcome_columns())
               + list(outcome.covariates) if c not in ds.columns]
    if missing:
        raise ConfigError(f"dataset lacks configured columns: {missing}")
    return cfg, ds, design, outcome, error


def _complete_case(ds: Dataset, design, outcome) -> tuple[Dataset, int]:
    """Rows with the first measure and all covariates observed (the
    complete-case subset the naive and RC analyses use)."""
    first = design.role(design.always_observed_measures()[0])
    keep = ~ds.miss(first)
    for c in outcome.covariates:
        keep &= ~ds.miss(c)
    dropped = int(ds.n - keep.sum())
    return (ds.take(np.flatnonzero(keep)) if dropped else ds), dropped


def _run_method(method, ds, design, outcome, error, opts, seed, out, stem):
    rng = RngStream(seed)
    level = float(opts.get("level", 0.95))
    if method == "naive":
        sub, dropped = _complete_case(ds, design, outcome)
        fit = fit_naive(sub, design, outcome)
        fit.metadata["complete_case_dropped"] = dropped
        return fit, {}
    if method == "rc":
        sub, dropped = _complete_case(ds, design, outcome)
        fit = regression_calibration(
            sub, design, outcome,
            se_method=opts.get("se_method", "delta" if outcome.kind != "weibull" else "bootstrap"),
            B=int(opts.get("bootstrap_b", 200)),
            rng=rng.split(1),
            variant=opts.get("rc_variant", "random_intercept"),
            level=level,
        )
        fit.metadata["complete_case_dropped"] = dropped
        return fit, {}
    if method == "ml":
        fit = mle_mod.fit_ml(
            ds, design, outcome, error=error,
            K=int(opts.get("quad_points", mle_mod.DEFAULT_K)),
            starts=int(opts.get("starts", 5)),
            level=level,
        )
        profile_params = opts.get("profile") or []
        if isinstance(profile_params, str):
            profile_params = [profile_params]
        if profile_params:
            intervals = fit.conf_int(level)
            for pname in profile_params:
                intervals[pname] = mle_mod.profile_interval(fit, ds, pname, level=level)
            fit = mle_mod.FitResult(
                names=fit.names, beta=fit.beta, cov=fit.cov, loglik=fit.loglik,
                converged=fit.converged, n_iter=fit.n_iter, grad_norm=fit.grad_norm,
                shape=fit.shape, method="ml", intervals=intervals, level=level,
                metadata=fit.metadata,
            )
            fit.metadata["profile_parameters"] = list(profile_params)
        return fit, {}
    if method == "bayes":
        priors = bayes_mod.PriorSpec.from_config(opts.get("priors", {})) if opts.get("priors") \
            else bayes_mod.PriorSpec()
        chains = bayes_mod.run_mcmc(
            ds, design, outcome, priors=priors,
            chains=int(opts.get("chains", 4)),
            iters=int(opts.get("iters", 10_000)),
            burnin=int(opts.get("burnin", 5_000)),
            rng=rng.split(2),
            thin=int(opts.get("thin", 1)),
        )
        summary = bayes_mod.summarize_posterior(chains, level=level)
        extras = {}
        dump_paths = []
        for ch in chains:
            p = out / f"{stem}_chain{ch.chain_id}.csv"
            with open(p, "w", newline="") as fh:
                w = _csv.writer(fh)
                w.writerow(ch.names)
                for row in zip(*(ch.draws[nm] for nm in ch.names)):
                    w.writerow([repr(float(v)) for v in row])
            dump_paths.append(p.name)
        diag = {
            "acceptance": {str(i): ch.acceptance for i, ch in enumerate(chains)},
            "rhat": {k: float(v) for k, v in summary.rhat.items()},
            "ess": {k: float(v) for k, v in summary.ess.items()},
            "flags": list(summary.flags),
            "chains": dump_paths,
        }
        diag_path = out / f"{stem}_bayes_diagnostics.json"
        diag_path.write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        extras["figures"] = [(save_traces, chains, out / f"{stem}_traces.png")]
        return summary, extras
    if method == "mi":
        pooled = mi_mod.run_mi(
            ds, design, outcome,
            variant=opts.get("mi_variant", "auto"),
            M=int(opts.get("m", mi_mod.DEFAULT_M)),
            iterations=int(opts.get("smc_iters", mi_mod.DEFAULT_SMC_ITERS)),
            rng=rng.split(3),
            level=level,
        )
        if opts.get("dump_imputations"):
            variant = pooled.metadata.get("variant")
            imp = _reimpute_for_dump(ds, design, outcome, variant, opts, rng.split(3))
            for i, d in enumerate(imp):
                write_csv(d, out / f"{stem}_imputation{i}.csv")
        return pooled, {}
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def _reimpute_for_dump(ds, design, outcome, variant, opts, rng):
    M = int(opts.get("m", mi_mod.DEFAULT_M))
    if variant == "validation":
        return mi_mod.impute_validation(ds, design, outcome, M=M, rng=rng.split(0))
    if variant == "normal":
        return mi_mod.impute_replicates_normal(ds, design, outcome, M=M, rng=rng.split(0))
    return mi_mod.impute_smcfcs(ds, design, outcome, M=M,
                                iterations=int(opts.get("smc_iters", mi_mod.DEFAULT_SMC_ITERS)),
                                rng=rng.split(0))


def _write_report(report, out: Path, stem: str, extras=None) -> None:
    (out / f"{stem}.json").write_text(render_json(report))
    (out / f"{stem}.txt").write_text(render_text(report))
    (out / f"{stem}.csv").write_text(render_csv(report))
    save_forest(report, out / f"{stem}_forest.png")
    for fn, arg, path in (extras or {}).get("figures", []):
        fn(arg, path)


@click.group()
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config binding columns to roles and methods to options.")
@click.option("--out", default=None, help="Output directory (or MEMISS_OUT).")
@click.pass_context
def main(ctx, seed, config_path, out):
    """Measurement error correction for regression models."""
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, config_path=config_path, out=out)


@main.command()
@click.argument("data", type=click.Path(exists=True))
@click.pass_context
def validate(ctx, data):
    """Check a dataset against its declared design/outcome contract."""
    try:
        _, ds, design, outcome, _ = _load_bundle(ctx.obj["config_path"], data)
        violations = validate_dataset(ds, design, outcome)
    except MemissError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    if not violations:
        click.echo(f"{data}: OK ({ds.n} rows)")
        sys.exit(EXIT_OK)
    for v in violations:
        click.echo(str(v))
    click.echo(f"{len(violations)} violation(s)")
    sys.exit(EXIT_CONFIG)


@main.command()
@click.option("--design", "design_kind", type=click.Choice(["validation", "replication", "calibration"]),
              default="replication")
@click.option("--outcome", "outcome_kind", type=click.Choice(["linear", "logistic", "weibull"]),
              default="linear")
@click.option("--n", type=int, default=1000)
@click.option("--mu-x", type=float, default=0.0)
@click.option("--sigma2-x", "--sigma-x", type=float, default=1.0)
@click.option("--sigma2-u", "--sigma-u", type=float, default=0.25)
@click.option("--alpha", type=float, default=0.0)
@click.option("--beta-x", type=float, default=1.0)
@click.option("--beta-z", type=float, default=0.5)
@click.option("--sigma2-y", type=float, default=1.0)
@click.option("--theta0", type=float, default=0.0)
@click.option("--theta1", type=float, default=1.0)
@click.option("--systematic", is_flag=True, default=False,
              help="First measure carries the linear systematic distortion.")
@click.option("--n-second", type=click.Choice(["1", "2"]), default="1",
              help="Second-type measures in a calibration design.")
@click.option("--z-kind", type=click.Choice(["normal", "binary"]), default="normal")
@click.option("--z-p", type=float, default=0.5)
@click.option("--corr-xz", type=float, default=0.0)
@click.option("--selection-p", type=float, default=0.5, help="MCAR substudy fraction.")
@click.option("--censoring", type=float, default=0.0)
@click.option("--weibull-shape", type=float, default=1.5)
@click.option("--z-missing-p", type=float, default=0.0)
@click.option("--xstar1-missing-p", type=float, default=0.0)
@click.option("--prefix", default="sim", help="Output file stem.")
@click.pass_context
def simulate_cmd(ctx, design_kind, outcome_kind, n, mu_x, sigma2_x, sigma2_u, alpha, beta_x,
                 beta_z, sigma2_y, theta0, theta1, systematic, n_second, z_kind, z_p, corr_xz,
                 selection_p, censoring, weibull_shape, z_missing_p, xstar1_missing_p, prefix):
    """Simulate a known-truth dataset; writes <prefix>.csv and <prefix>_truth.json."""
    try:
        seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else 0
        error = ErrorModelSpec(
            kind="systematic" if systematic else "classical",
            sigma2_u=sigma2_u,
            theta0=theta0 if systematic else 0.0,
            theta1=theta1 if systematic else 1.0,
        )
        cfg = SimConfig(
            n=n, design=design_kind, outcome=outcome_kind, mu_x=mu_x, sigma2_x=sigma2_x,
            z_kind=z_kind, z_p=z_p, corr_xz=corr_xz, alpha=alpha, beta_x=beta_x, beta_z=beta_z,
            sigma2_y=sigma2_y, weibull_shape=weibull_shape, censoring=censoring,
            error=error, n_second=int(n_second),
            selection=SelectionMechanism(kind="mcar", p=selection_p),
            z_missing_p=z_missing_p, xstar1_missing_p=xstar1_missing_p, seed=seed,
        )
        ds, design, outcome, truth = simulate(cfg)
        out = _out_dir(ctx.obj["out"])
        write_csv(ds, out / f"{prefix}.csv")
        (out / f"{prefix}_truth.json").write_text(
            json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")
        click.echo(f"wrote {out / (prefix + '.csv')} and {out / (prefix + '_truth.json')}")
    except MemissError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(EXIT_OK)


main.add_command(simulate_cmd, name="simulate")


def _resolved_config(cfg, method, opts, seed):
    resolved = dict(cfg)
    resolved["method"] = method
    resolved["method_options"] = opts
    resolved["seed"] = seed
    return resolved


@main.command()
@click.argument("data", type=click.Path(exists=True))
@click.option("--method", type=click.Choice(METHODS), default=None)
@click.option("--se-method", type=click.Choice(["delta", "bootstrap"]), default=None)
@click.option("--bootstrap-b", type=int, default=None)
@click.option("--quad-points", type=int, default=None)
@click.option("--starts", type=int, default=None)
@click.option("--profile", multiple=True, help="Parameter(s) to give profile-likelihood intervals.")
@click.option("--chains", type=int, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--burnin", type=int, default=None)
@click.option("--prior-file", type=click.Path(exists=True), default=None)
@click.option("--mi-variant", type=click.Choice(["auto", "normal", "smcfcs", "validation"]), default=None)
@click.option("--m", type=int, default=None)
@click.option("--smc-iters", type=int, default=None)
@click.option("--dump-imputations", is_flag=True, default=False)
@click.option("--stem", default="report")
@click.pass_context
def correct(ctx, data, method, se_method, bootstrap_b, quad_points, starts, profile, chains,
            iters, burnin, prior_file, mi_variant, m, smc_iters, dump_imputations, stem):
    """Run one correction method and report it next to the naive fit."""
    try:
        cfg, ds, design, outcome, error = _load_bundle(ctx.obj["config_path"], data)
        violations = validate_dataset(ds, design, outcome)
        if violations:
            for v in violations[:20]:
                click.echo(str(v), err=True)
            click.echo(f"error: dataset violates its contract ({len(violations)} violation(s))", err=True)
            sys.exit(EXIT_CONFIG)
        method = method or cfg.get("method")
        if method not in METHODS:
            raise ConfigError(f"no method selected; pass --method or set 'method' in the config")
        opts = dict(cfg.get("method_options", {}))
        for key, val in (("se_method", se_method), ("bootstrap_b", bootstrap_b),
                         ("quad_points", quad_points), ("starts", starts),
                         ("chains", chains), ("iters", iters), ("burnin", burnin),
                         ("mi_variant", mi_variant), ("m", m), ("smc_iters", smc_iters)):
            if val is not None:
                opts[key] = val
        if profile:
            opts["profile"] = list(profile)
        if dump_imputations:
            opts["dump_imputations"] = True
        if prior_file:
            opts["priors"] = load_config(prior_file)
        seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else int(cfg.get("seed", 0))
        out = _out_dir(ctx.obj["out"])
    except MemissError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)

    results = {}
    try:
        sub, dropped = _complete_case(ds, design, outcome)
        naive = fit_naive(sub, design, outcome)
        naive.metadata["complete_case_dropped"] = dropped
        results["naive"] = result_entry(naive, outcome)
        extras = {}
        if method != "naive":
            fit, extras = _run_method(method, ds, design, outcome, error, opts, seed, out, stem)
            results[method] = result_entry(fit, outcome)
    except MemissError as e:
        click.echo(f"method failure: {e}", err=True)
        sys.exit(EXIT_METHOD)

    report = build_report("correct", _resolved_config(cfg, method, opts, seed), seed, outcome, results)
    _write_report(report, out, stem, extras)
    click.echo(render_text(report))
    sys.exit(EXIT_OK)


@main.command()
@click.argument("data", type=click.Path(exists=True))
@click.option("--methods", default="naive,rc", help="Comma-separated method list.")
@click.option("--truth", "truth_path", type=click.Path(exists=True), default=None)
@click.option("--stem", default="compare")
@click.pass_context
def compare(ctx, data, methods, truth_path, stem):
    """Run several methods side by side in one combined report."""
    try:
        cfg, ds, design, outcome, error = _load_bundle(ctx.obj["config_path"], data)
        method_list = [m.strip() for m in methods.split(",") if m.strip()]
        if len(method_list) < 2:
            raise ConfigError("compare needs at least two methods")
        for mth in method_list:
            if mth not in METHODS:
                raise ConfigError(f"unknown method {mth!r}")
        opts = dict(cfg.get("method_options", {}))
        seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else int(cfg.get("seed", 0))
        out = _out_dir(ctx.obj["out"])
        truth = json.loads(Path(truth_path).read_text()) if truth_path else None
    except MemissError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except json.JSONDecodeError as e:
        click.echo(f"error: invalid truth JSON ({e})", err=True)
        sys.exit(EXIT_CONFIG)

    results = {}
    extras_all = {}
    n_ok = 0
    for mth in method_list:
        try:
            fit, extras = _run_method(mth, ds, design, outcome, error, opts, seed, out, f"{stem}_{mth}")
            results[mth] = result_entry(fit, outcome)
            for k, v in extras.items():
                extras_all.setdefault(k, []).extend(v)
            n_ok += 1
        except MemissError as e:
            results[mth] = error_entry(e)

    cfg_resolved = _resolved_config(cfg, ",".join(method_list), opts, seed)
    report = build_report("compare", cfg_resolved, seed, outcome, results, truth=truth)
    _write_report(report, out, stem, extras_all)
    click.echo(render_text(report))
    sys.exit(EXIT_OK if n_ok else EXIT_METHOD)


if __name__ == "__main__":
    main()
