"""Figure rendering for CLI reports.

All plots go straight to files through the Agg backend so the CLI works
on headless machines; every figure sits next to the CSV it illustrates.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_accuracy_bar(accuracy, path, title="Test accuracy by method"):
    """Bar chart of method -> accuracy, annotated with the values."""
    methods = list(accuracy)
    values = [accuracy[m] for m in methods]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(methods, values, color="#4878d0", width=0.6)
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, "%.3f" % v,
                ha="center", va="bottom", fontsize=9)
    ax.set_ylim(0.0, 1.12)
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_curve(rows, path, threshold_ms=None):
    """Pooling time per frame against feature dimension, one line per p.

    rows: list of dicts with keys d, p, ms_per_frame.
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for p in sorted({r["p"] for r in rows}):
        sub = sorted((r for r in rows if r["p"] == p), key=lambda r: r["d"])
        ax.plot([r["d"] for r in sub], [r["ms_per_frame"] for r in sub],
                marker="o", label="p = %d" % p)
    if threshold_ms is not None:
        ax.axhline(threshold_ms, color="crimson", linestyle="--",
                   linewidth=1, label="%g ms budget" % threshold_ms)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("feature dimension d")
    ax.set_ylabel("ms / frame")
    ax.set_title("Pooling cost per frame")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_pressure_trace(trace, path):
    """Per-epoch clean-vs-perturbed cross-entropy during noise generation."""
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(trace) + 1), trace, marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.set_title("Perturbation pressure")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
