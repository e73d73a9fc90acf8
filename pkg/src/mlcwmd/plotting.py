"""Static figures written next to the CSV outputs of the command-line tools."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .inference import random_effect_flags  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def bic_by_c(tables, path):
    """Boxplot (or points, for one run) of BIC against the number of clusters.

    ``tables`` is a list of per-run BIC tables (rows with keys C, bic, status).
    """
    cs = sorted({r["C"] for t in tables for r in t})
    data = [[r["bic"] for t in tables for r in t if r["C"] == c and r["status"] == "ok"] for c in cs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(tables) > 1:
        ax.boxplot(data, tick_labels=[str(c) for c in cs])
    else:
        ax.plot([str(c) for c in cs], [d[0] if d else np.nan for d in data], "o-")
    ax.set_xlabel("number of clusters C")
    ax.set_ylabel("BIC")
    return _save(fig, path)


def metric_by_method(rows, metric, split, path, methods=None):
    """Boxplot of one metric across replicates for every method."""
    methods = methods or sorted({r["method"] for r in rows})
    data = [[r["value"] for r in rows if r["method"] == m and r["metric"] == metric and r["split"] == split]
            for m in methods]
    keep = [i for i, d in enumerate(data) if d]
    fig, ax = plt.subplots(figsize=(1.4 * max(len(keep), 2) + 2, 3.5))
    ax.boxplot([data[i] for i in keep], tick_labels=[methods[i] for i in keep])
    ax.set_ylabel(f"{metric} ({split})")
    return _save(fig, path)


def beta_recovery(estimates, truth, names, path, baselines=None):
    """Per-cluster boxplots of estimated coefficients with the true values marked.

    ``estimates`` has shape (replicates, C, m); ``baselines`` maps a label to
    (replicates, m) pooled estimates drawn as crosses at their mean.
    """
    est = np.asarray(estimates)
    C, m = truth.shape
    fig, axes = plt.subplots(C, 1, figsize=(max(6, 0.9 * m + 2), 2.6 * C), squeeze=False)
    for c in range(C):
        ax = axes[c, 0]
        ax.boxplot([est[:, c, k] for k in range(m)], tick_labels=list(names))
        ax.plot(range(1, m + 1), truth[c], "r_", markersize=18, mew=2, label="true")
        for (label, vals), mk in zip((baselines or {}).items(), ("x", "+")):
            ax.plot(range(1, m + 1), np.mean(vals, axis=0), mk, label=label)
        ax.set_title(f"cluster {c + 1}", fontsize=9)
        ax.axhline(0, color="0.8", lw=0.8)
    axes[0, 0].legend(fontsize=7, loc="best")
    return _save(fig, path)


def random_effects(fit, group_labels, path):
    """Group intercepts with 95% intervals per cluster, coloured by significance."""
    C = fit.C
    fig, axes = plt.subplots(C, 1, figsize=(max(6, 0.25 * len(group_labels) + 2), 2.4 * C), squeeze=False)
    colors = {1: "tab:red", -1: "tab:green", 0: "0.5"}
    for c, cp in enumerate(fit.components):
        ax = axes[c, 0]
        reg = cp.regression
        flags = random_effect_flags(reg)
        x = np.arange(reg.b.shape[0])
        for f in (-1, 0, 1):
            sel = flags == f
            ax.errorbar(x[sel], reg.b[sel], yerr=1.96 * reg.b_sd[sel], fmt="o", ms=3,
                        color=colors[f], ecolor=colors[f])
        ax.axhline(0, color="k", lw=0.6)
        ax.set_xticks(x, [str(g) for g in group_labels[: x.size]], rotation=90, fontsize=6)
        ax.set_title(f"cluster {c + 1}: sigma_b = {reg.sigma_b:.2f}", fontsize=9)
    return _save(fig, path)


def interactions(fit, names, path):
    """Heatmaps of the fitted interaction matrices."""
    mats = [cp.ising.gamma for cp in fit.components]
    if not mats or mats[0].size == 0:
        return None
    vmax = max(np.abs(g).max() for g in mats) or 1.0
    fig, axes = plt.subplots(1, len(mats), figsize=(3.2 * len(mats), 3), squeeze=False)
    for c, g in enumerate(mats):
        ax = axes[0, c]
        im = ax.imshow(g, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_xticks(range(len(names)), names, fontsize=7)
        ax.set_yticks(range(len(names)), names, fontsize=7)
        for (i, j), v in np.ndenumerate(g):
            if i != j:
                ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7)
        ax.set_title(f"cluster {c + 1}", fontsize=9)
    fig.colorbar(im, ax=axes[0, -1], shrink=0.8)
    return _save(fig, path)


def scenario_bars(grids, path, extra=None):
    """Risk interval from -1 to +1 SD per record, with the b = 0 value marked.

    ``extra`` maps a model label to a list of (low, mid, high) tuples per record.
    """
    labels = [g.label for g in grids]
    x = np.arange(len(grids))
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(grids) + 2), 3.5))
    series = {"mixture": [g.p for g in grids], **(extra or {})}
    width = 0.8 / len(series)
    for s, (name, vals) in enumerate(series.items()):
        vals = np.asarray(vals, dtype=float)
        pos = x - 0.4 + width * (s + 0.5)
        ax.bar(pos, vals[:, 2] - vals[:, 0], bottom=vals[:, 0], width=width * 0.9, alpha=0.5, label=name)
        ax.plot(pos, vals[:, 1], "k_", markersize=10)
    ax.set_xticks(x, labels)
    ax.set_ylabel("predicted probability")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    return _save(fig, path)
