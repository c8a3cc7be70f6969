"""Matplotlib figures written next to the CSV outputs.

All functions take already-computed arrays/rows, write one PNG and return
its path. The Agg backend is forced so the CLI works headless.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_COLORS = {
    "ce_only": "0.5",
    "kd": "tab:blue",
    "pearson": "tab:orange",
    "pearson_z": "tab:green",
    "cmkd": "tab:red",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _curves(long_rows, metric):
    """method -> (epochs, mean over runs, std over runs) for one metric."""
    per = defaultdict(lambda: defaultdict(list))
    for r in long_rows:
        if r["metric"] == metric:
            per[r["method"]][int(r["epoch"])].append(float(r["value"]))
    out = {}
    for method, by_epoch in per.items():
        epochs = sorted(by_epoch)
        vals = [np.array(by_epoch[e]) for e in epochs]
        out[method] = (np.array(epochs), np.array([v.mean() for v in vals]), np.array([v.std() for v in vals]))
    return out


def plot_correlation_curves(long_rows, path) -> Path:
    """Teacher/student Pearson and Spearman per epoch, one line per method."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, metric, title in zip(axes, ("mean_pearson_ts", "mean_spearman_ts"), ("Pearson", "Spearman")):
        for method, (ep, mu, sd) in sorted(_curves(long_rows, metric).items()):
            if np.all(np.isnan(mu)):
                continue
            c = METHOD_COLORS.get(method)
            ax.plot(ep, mu, label=method, color=c, lw=1.5)
            ax.fill_between(ep, mu - sd, mu + sd, color=c, alpha=0.15, lw=0)
        ax.set_title(f"{title} (teacher vs student logits)")
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("mean correlation on held-out slice")
    axes[1].legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_metric_curves(long_rows, metric, path, ylabel=None) -> Path:
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for method, (ep, mu, sd) in sorted(_curves(long_rows, metric).items()):
        c = METHOD_COLORS.get(method)
        ax.plot(ep, mu, label=method, color=c, lw=1.5)
        ax.fill_between(ep, mu - sd, mu + sd, color=c, alpha=0.15, lw=0)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel or metric)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_logit_diff(D, path, title="|teacher - student| logits", vmax=None) -> Path:
    """Heatmap of a class x class logit-difference matrix; NaN rows stay blank."""
    D = np.asarray(D, dtype=float)
    fig, ax = plt.subplots(figsize=(4.4, 3.8))
    im = ax.imshow(D, cmap="Blues", vmin=0, vmax=vmax if vmax is not None else np.nanmax(D))
    ax.set_xlabel("logit of class j")
    ax.set_ylabel("true class i")
    ax.set_title(title, fontsize=9)
    ax.set_xticks(range(D.shape[1]))
    ax.set_yticks(range(D.shape[0]))
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, path)


def plot_robustness(tables, path) -> Path:
    """Grouped bars: ``tables`` maps a label (method/run) to {column: accuracy}."""
    labels = list(tables)
    cols = list(next(iter(tables.values())))
    x = np.arange(len(cols))
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 2, 3.6))
    for i, lab in enumerate(labels):
        ax.bar(x + i * width - 0.4 + width / 2, [tables[lab][c] for c in cols], width,
               label=lab, color=METHOD_COLORS.get(lab))
    ax.set_xticks(x)
    ax.set_xticklabels(cols, rotation=20, fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)
