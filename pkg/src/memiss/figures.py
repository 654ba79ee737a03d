"""Figure rendering for the report path.

A forest plot of the estimates and intervals per displayed coefficient,
grouped by method, written next to the delimited report output; Bayesian
runs additionally get per-parameter trace plots. Rendering is deterministic
(Agg backend, fixed layout, no timestamps in the PNG metadata).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "memiss"}


def save_forest(report, path) -> None:
    """Horizontal forest plot: one band per coefficient, one marker per
    method, whiskers at the interval estimates."""
    params = report["display_parameters"]
    methods = [m for m, e in report["methods"].items() if e.get("ok")]
    fig, ax = plt.subplots(figsize=(7.0, 1.2 + 0.9 * max(len(params), 1)))
    offsets = np.linspace(-0.3, 0.3, max(len(methods), 1))
    for jm, m in enumerate(methods):
        entry = report["methods"][m]
        ys, xs, lo, hi = [], [], [], []
        for jp, p in enumerate(params):
            cell = entry["rows"].get(p)
            if cell is None or not np.isfinite(cell["estimate"]):
                continue
            ys.append(jp + offsets[jm])
            xs.append(cell["estimate"])
            lo.append(cell["estimate"] - cell["lower"])
            hi.append(cell["upper"] - cell["estimate"])
        if not xs:
            continue
        ax.errorbar(xs, ys, xerr=[lo, hi], fmt="o", capsize=3, markersize=4, label=m)
    if "truth" in report:
        for jp, p in enumerate(params):
            if p in report["truth"]:
                ax.plot([report["truth"][p]], [jp], marker="x", color="black", markersize=8,
                        label="truth" if jp == 0 else None)
    ax.axvline(0.0, color="0.8", linewidth=0.8, zorder=0)
    ax.set_yticks(range(len(params)))
    ax.set_yticklabels(params)
    ax.invert_yaxis()
    ax.set_xlabel("estimate (interval)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def save_traces(chains, path, parameters=None) -> None:
    """Stacked trace plots of the kept draws, one panel per parameter."""
    if not chains:
        return
    names = list(parameters or chains[0].names)
    names = [n for n in names if n in chains[0].names]
    fig, axes = plt.subplots(len(names), 1, figsize=(7.0, 1.4 * len(names)),
                             sharex=True, squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        for ch in chains:
            ax.plot(ch.draws[name], linewidth=0.5)
        ax.axvline(ch.burnin // ch.thin, color="0.6", linewidth=0.8, linestyle="--")
        ax.set_ylabel(name, fontsize=8)
    axes[-1, 0].set_xlabel("iteration (thinned)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
