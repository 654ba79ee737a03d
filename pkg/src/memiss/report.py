"""Report assembly and rendering.

One report dict drives all outputs: machine JSON, an aligned plain-text
table (one row per displayed coefficient, one column group per method,
cells "estimate (lower, upper)"), a delimited CSV, and the forest figure.
Every report embeds the fully resolved config and seed so a run can be
reproduced byte-identically.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from .core import OutcomeSpec


def format_cell(estimate: float, lower: float, upper: float) -> str:
    """Render "0.085 (0.014, 0.157)" with three decimals."""
    return f"{estimate:.3f} ({lower:.3f}, {upper:.3f})"


def _clean(value):
    """Drop non-JSON-serializable metadata, keep scalars/strings/containers."""
    if isinstance(value, (bool, int, str)) or value is None:
        return value
    if isinstance(value, float):
        return None if not np.isfinite(value) else value
    if isinstance(value, (np.floating, np.integer)):
        return _clean(float(value))
    if isinstance(value, Mapping):
        out = {}
        for k, v in value.items():
            cv = _clean(v)
            if cv is not None or v is None:
                out[str(k)] = cv
        return out
    if isinstance(value, (list, tuple)):
        cleaned = [_clean(v) for v in value]
        return [c for c in cleaned if c is not None or True]
    return None


def displayed_parameters(outcome: OutcomeSpec) -> list[str]:
    """Exposure first, then the error-free covariates (Table layout)."""
    return [outcome.exposure, *outcome.covariates]


def result_entry(result, outcome: OutcomeSpec, level: float = 0.95) -> dict:
    """Extract a method's rows and full parameter set from any fit-like
    object (FitResult, PooledResult, PosteriorSummary)."""
    intervals = result.conf_int()
    rows = {}
    for name in displayed_parameters(outcome):
        if name not in result.names:
            continue
        lo, hi = intervals.get(name, (float("nan"), float("nan")))
        est = result.coef(name)
        rows[name] = {"estimate": est, "lower": lo, "upper": hi,
                      "cell": format_cell(est, lo, hi)}
    entry = {
        "ok": True,
        "method": getattr(result, "method", ""),
        "rows": rows,
        "parameters": {n: float(b) for n, b in zip(result.names, result.beta)},
        "intervals": {n: [float(a), float(b)] for n, (a, b) in intervals.items()},
        "metadata": _clean(getattr(result, "metadata", {})) or {},
    }
    flags = getattr(result, "flags", None)
    if flags:
        entry["flags"] = list(flags)
    shape = getattr(result, "shape", None)
    if shape is not None:
        entry["parameters"].setdefault("shape", float(shape))
    return entry


def error_entry(exc: Exception) -> dict:
    return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def build_report(kind: str, config: Mapping, seed, outcome: OutcomeSpec,
                 results: Mapping[str, dict], truth: Mapping | None = None,
                 level: float = 0.95) -> dict:
    """Assemble the report dict: per-method entries keyed by method name,
    optional per-method bias against a supplied truth record."""
    report = {
        "kind": kind,
        "seed": seed,
        "level": level,
        "config": _clean(config),
        "display_parameters": displayed_parameters(outcome),
        "methods": dict(results),
    }
    if truth is not None:
        params = truth.get("params", {})
        report["truth"] = {k: float(v) for k, v in params.items()}
        for entry in report["methods"].values():
            if not entry.get("ok"):
                continue
            entry["bias"] = {
                name: entry["rows"][name]["estimate"] - params[name]
                for name in entry.get("rows", {})
                if name in params
            }
    return report


def render_json(report: Mapping) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def render_text(report: Mapping) -> str:
    """Aligned table: rows = displayed coefficients, columns = methods."""
    methods = list(report["methods"])
    params = report["display_parameters"]
    header = ["covariate"] + methods
    lines = []
    rows = []
    for p in params:
        row = [p]
        for m in methods:
            entry = report["methods"][m]
            if not entry.get("ok"):
                row.append("ERROR")
            else:
                cell = entry["rows"].get(p)
                row.append(cell["cell"] if cell else "-")
        rows.append(row)
    if "truth" in report:
        header.append("truth")
        for row, p in zip(rows, params):
            row.append(f"{report['truth'][p]:.3f}" if p in report["truth"] else "-")
    widths = [max(len(header[j]), *(len(r[j]) for r in rows)) if rows else len(header[j])
              for j in range(len(header))]
    def fmt(row):
        return "  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
    lines.append(fmt(header))
    lines.append(fmt(["-" * w for w in widths]))
    for row in rows:
        lines.append(fmt(row))
    notes = []
    for m in methods:
        entry = report["methods"][m]
        if not entry.get("ok"):
            notes.append(f"{m}: {entry['error']}")
        for flag in entry.get("flags", []):
            notes.append(f"{m}: {flag}")
    if notes:
        lines.append("")
        lines.extend(notes)
    return "\n".join(lines) + "\n"


def render_csv(report: Mapping) -> str:
    """Delimited long format: method,parameter,estimate,lower,upper[,bias]."""
    has_truth = "truth" in report
    cols = ["method", "parameter", "estimate", "lower", "upper"]
    if has_truth:
        cols.append("bias")
    lines = [",".join(cols)]
    for m, entry in report["methods"].items():
        if not entry.get("ok"):
            lines.append(",".join([m, "error", "", "", ""] + ([""] if has_truth else [])))
            continue
        for p, cell in entry["rows"].items():
            row = [m, p, repr(cell["estimate"]), repr(cell["lower"]), repr(cell["upper"])]
            if has_truth:
                bias = entry.get("bias", {}).get(p)
                row.append(repr(bias) if bias is not None else "")
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"
