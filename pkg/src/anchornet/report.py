"""Matplotlib figures rendered next to the delimited evaluation output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_tradeoff_curve(rows: list[dict], path: str, xlabel: str = "mean FLOPs (M)") -> None:
    """Accuracy versus mean compute, one marker per evaluated point."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    flops = [row["mean_flops"] / 1e6 for row in rows]
    acc = [100.0 * row["accuracy"] for row in rows]
    ax.plot(flops, acc, marker="o", color="#1f77b4")
    for row, x, y in zip(rows, flops, acc):
        ax.annotate(str(row.get("label", "")), (x, y), textcoords="offset points",
                    xytext=(4, 4), fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_exit_histogram(rows: list[dict], path: str) -> None:
    """Stacked exit-stage counts for each evaluated point."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    labels = [str(row.get("label", i)) for i, row in enumerate(rows)]
    counts = np.array([row["exit_counts"] for row in rows], dtype=float)
    bottom = np.zeros(len(rows))
    cmap = plt.get_cmap("viridis")
    for stage in range(counts.shape[1]):
        vals = counts[:, stage]
        ax.bar(labels, vals, bottom=bottom, label=f"exit {stage + 1}",
               color=cmap(stage / max(counts.shape[1] - 1, 1)))
        bottom += vals
    ax.set_ylabel("samples")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(history, path: str) -> None:
    """Per-epoch loss (left axis) and accuracy (right axis)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    epochs = [h.epoch for h in history]
    ax.plot(epochs, [h.loss for h in history], color="#d62728", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="#d62728")
    ax2 = ax.twinx()
    ax2.plot(epochs, [100.0 * h.accuracy for h in history], color="#1f77b4", label="accuracy")
    ax2.set_ylabel("accuracy (%)", color="#1f77b4")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
