"""Figures written next to the CSV/JSON outputs.

Uses the Agg backend and strips PNG metadata so reruns produce identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_NAMES = ("prefetching", "frequency", "recency", "total")
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(curve, path):
    """One line per loss term against epoch, log y axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    arr = np.asarray(curve, dtype=np.float64).reshape(-1, len(LOSS_NAMES))
    epochs = np.arange(1, arr.shape[0] + 1)
    for k, name in enumerate(LOSS_NAMES):
        if arr.shape[0]:
            ax.plot(epochs, np.maximum(arr[:, k], 1e-12), marker="o", ms=3, label=name)
    if arr.shape[0]:
        ax.set_yscale("log")
        ax.legend(frameon=False)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    fig.tight_layout()
    _save(fig, path)


def plot_hit_rates(table, path):
    """Grouped bars: ``table`` maps trace name -> {policy: hit rate}."""
    traces = list(table)
    policies = []
    for t in traces:
        for p in table[t]:
            if p not in policies:
                policies.append(p)
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(traces) * max(len(policies), 1) / 3), 4))
    width = 0.8 / max(len(policies), 1)
    x = np.arange(len(traces))
    for k, p in enumerate(policies):
        vals = [table[t].get(p, np.nan) for t in traces]
        ax.bar(x + (k - (len(policies) - 1) / 2) * width, vals, width, label=p)
    ax.set_xticks(x)
    ax.set_xticklabels(traces, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("hit rate")
    if policies:
        ax.legend(frameon=False, ncol=min(len(policies), 6), fontsize=8, loc="upper center")
    fig.tight_layout()
    _save(fig, path)
