"""Matplotlib renderings of run outputs, written next to the data files.

All figures go through the Agg backend and are stripped of metadata so a
re-run produces byte-identical PNGs.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quality import OFFSET_BINS, UNIT_BINS

_SAVE = dict(dpi=110, metadata={"Software": None})


def training_curves(diagnostics, path: str) -> str:
    """Loss, temperature, similarity means, and fp/fn counts per epoch."""
    epochs = [d.epoch for d in diagnostics]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    ax = axes[0, 0]
    ax.plot(epochs, [d.loss for d in diagnostics], color="tab:blue")
    ax.set_ylabel("loss")
    ax = axes[0, 1]
    ax.plot(epochs, [d.tau for d in diagnostics], color="tab:orange")
    ax.set_ylabel("temperature")
    ax = axes[1, 0]
    ax.plot(epochs, [d.mean_pos_sim for d in diagnostics],
            label="positive", color="tab:green")
    ax.plot(epochs, [d.mean_neg_sim for d in diagnostics],
            label="negative", color="tab:red")
    ax.set_ylabel("mean similarity")
    ax.set_xlabel("epoch")
    ax.legend(loc="best", fontsize=8)
    ax = axes[1, 1]
    ax.plot(epochs, [d.fp for d in diagnostics], label="fp", color="tab:red")
    ax.plot(epochs, [d.fn for d in diagnostics], label="fn", color="tab:purple")
    ax.set_ylabel("count at p=0.5")
    ax.set_xlabel("epoch")
    ax.legend(loc="best", fontsize=8)
    phase2 = [d.epoch for d in diagnostics if d.phase == 2]
    if phase2:
        for a in axes.ravel():
            a.axvline(phase2[0] - 0.5, color="gray", lw=0.8, ls="--")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def accuracy_figure(table, path: str) -> str:
    """Bar chart of offset accuracy per clip length."""
    lengths = sorted(table.accuracies)
    values = [table.accuracies[k] for k in lengths]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(k) for k in lengths], values, color="tab:blue")
    ax.set_xlabel("clip length (frames)")
    ax.set_ylabel("offset accuracy")
    ax.set_ylim(0.0, 1.05)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def audit_histograms(summary, path: str) -> str:
    """Offset, confidence, and offscreen-ratio histograms of an audit."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    centers = 0.5 * (OFFSET_BINS[:-1] + OFFSET_BINS[1:])
    axes[0].bar(centers, summary.offset_hist, width=0.9, color="tab:blue")
    axes[0].set_xlabel("global offset (frames)")
    axes[0].set_ylabel("videos")
    width = UNIT_BINS[1] - UNIT_BINS[0]
    mids = UNIT_BINS[:-1] + width / 2
    axes[1].bar(mids, summary.prob_hist, width=width * 0.9, color="tab:green")
    axes[1].set_xlabel("probability at offset")
    axes[2].bar(mids, summary.ratio_hist, width=width * 0.9, color="tab:red")
    axes[2].set_xlabel("offscreen ratio")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path
