"""Matplotlib figure rendering for the CLI report paths."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(epochs, losses, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sdr_chart(report, path) -> None:
    thresholds = sorted(report.sdr)
    values = [report.sdr[z] for z in thresholds]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(z) for z in thresholds], values, color="#4878b0")
    ax.set_xlabel(f"threshold ({report.unit})")
    ax.set_ylabel("detection rate (%)")
    ax.set_ylim(0, 105)
    for i, v in enumerate(values):
        ax.text(i, v + 1.5, f"{v:.1f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_error_histogram(report, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(report.per_point, bins=min(30, max(5, report.n_landmarks // 4)),
            color="#6aa66a", edgecolor="black", lw=0.5)
    ax.axvline(report.mre, color="crimson", ls="--", lw=1.2,
               label=f"mean = {report.mre:.3f} {report.unit}")
    ax.set_xlabel(f"radial error ({report.unit})")
    ax.set_ylabel("landmarks")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_flops_chart(report, path) -> None:
    stages = [row.stage for row in report.stages]
    dense = [row.dense_macs for row in report.stages]
    routed = [row.bra_macs for row in report.stages]
    x = np.arange(len(stages))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, dense, width=0.4, label="dense attention", color="#b05454")
    ax.bar(x + 0.2, routed, width=0.4, label="routed attention", color="#4878b0")
    ax.set_xticks(x, [f"stage {s}" for s in stages])
    ax.set_ylabel("token-attention MACs")
    ax.set_yscale("log")
    ax.legend()
    for xi, row in zip(x, report.stages):
        ax.text(xi + 0.2, row.bra_macs * 1.1, f"x{row.ratio:.3g}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_prediction_overlay(image: np.ndarray, pred, gt, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    ax.scatter(gt[:, 0], gt[:, 1], s=42, marker="o", facecolors="none",
               edgecolors="lime", lw=1.5, label="ground truth")
    ax.scatter(pred[:, 0], pred[:, 1], s=24, marker="x", color="red",
               lw=1.5, label="prediction")
    ax.legend(loc="lower right", fontsize=8)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
