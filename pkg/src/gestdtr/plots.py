"""Report figures rendered alongside the delimited output files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def estimate_boxplots(report, truths, path) -> None:
    """Boxplots of blip estimates per parameter, truth marked by a line."""
    est = report.estimates
    fig, ax = plt.subplots(figsize=(1.6 * est.shape[1] + 1.5, 4.0))
    ax.boxplot([est[:, k] for k in range(est.shape[1])],
               tick_labels=report.param_names, showfliers=False)
    for k, t in enumerate(truths):
        ax.hlines(t, k + 0.75, k + 1.25, colors="crimson", lw=1.5)
    ax.set_ylabel("estimate")
    ax.set_title(f"n = {report.scenario.n}, {report.n_converged} converged runs")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def selection_rate_bars(rows, path, title="") -> None:
    """Grouped bars of correct-selection rates per truth and method."""
    truths = sorted({(r["stage"], tuple(r["true"])) for r in rows})
    methods = sorted({r["method"] for r in rows})
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(truths) + 3, 4.0))
    for mi, method in enumerate(methods):
        rates = []
        for stage, true in truths:
            match = [r for r in rows
                     if r["method"] == method and r["stage"] == stage
                     and tuple(r["true"]) == true]
            rates.append(match[0]["rate"] if match else np.nan)
        xs = np.arange(len(truths)) + mi * width
        ax.bar(xs, rates, width=width, label=method)
    labels = [f"s{stage}: {'+'.join(true) or 'intercept'}" for stage, true in truths]
    ax.set_xticks(np.arange(len(truths)) + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("correct-selection rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def trace_boxplots(traces_by_dim, path) -> None:
    """Boxplots of the penalty K per fitted blip dimension, stage by stage.

    traces_by_dim maps blip dimension -> (reps, n_stages) array of K values.
    """
    dims = sorted(traces_by_dim)
    n_stages = next(iter(traces_by_dim.values())).shape[1]
    fig, axes = plt.subplots(n_stages, 1, figsize=(1.5 * len(dims) + 2, 2.8 * n_stages),
                             sharex=True, squeeze=False)
    for j in range(n_stages):
        ax = axes[j, 0]
        ax.boxplot([traces_by_dim[p][:, j] for p in dims],
                   tick_labels=[str(p) for p in dims], showfliers=False)
        for k, p in enumerate(dims):
            ax.hlines(p, k + 0.75, k + 1.25, colors="crimson", lw=1.5)
        ax.set_ylabel(f"stage {j + 1} K")
    axes[-1, 0].set_xlabel("fitted blip dimension")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
