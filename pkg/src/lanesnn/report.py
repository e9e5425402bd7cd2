"""Figure rendering for the CLI report paths.

Each function takes already-computed rows (the same ones written to CSV) and
saves a PNG next to them. The Agg backend keeps rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_loss_curves",
    "save_pr_curve",
    "save_mask_grid",
    "save_quant_report_figure",
]

_DPI = 150


def save_loss_curves(metrics: list[dict], path: str) -> None:
    """Training loss components per epoch, with test IoU on a second axis."""
    epochs = [m["epoch"] for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [m["loss_total"] for m in metrics], label="total", color="tab:blue")
    ax.plot(epochs, [m["loss_mse"] for m in metrics], label="mse", color="tab:orange", lw=0.9)
    ax.plot(epochs, [m["loss_wce"] for m in metrics], label="wce", color="tab:green", lw=0.9)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    eval_pts = [(m["epoch"], m["test_iou"]) for m in metrics if m["test_iou"] is not None]
    if eval_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*eval_pts), "o-", color="tab:red", ms=3, label="test IoU")
        ax2.set_ylabel("test IoU", color="tab:red")
        ax2.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_pr_curve(pr_rows: list[tuple[float, float, float, float]], path: str) -> None:
    """Precision/recall over the threshold sweep, annotated with best F."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    recalls = [r for _, _, r, _ in pr_rows]
    precisions = [p for _, p, _, _ in pr_rows]
    ax1.plot(recalls, precisions, "o-", ms=3)
    ax1.set_xlabel("recall")
    ax1.set_ylabel("precision")
    ax1.set_xlim(0.0, 1.05)
    ax1.set_ylim(0.0, 1.05)
    ths = [t for t, _, _, _ in pr_rows]
    fs = [f for _, _, _, f in pr_rows]
    ax2.plot(ths, fs, "o-", ms=3, color="tab:purple")
    ax2.set_xlabel("threshold")
    ax2.set_ylabel("F-measure")
    ax2.set_ylim(0.0, 1.05)
    best = int(np.argmax(fs))
    ax2.axvline(ths[best], color="gray", ls="--", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_mask_grid(
    panels: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]],
    path: str,
    max_rows: int = 8,
) -> None:
    """Rows of (input, label, predicted rates) images for visual inspection."""
    panels = panels[:max_rows]
    n = len(panels)
    fig, axes = plt.subplots(n, 3, figsize=(9, 1.1 * n + 0.6), squeeze=False)
    for row, (image_id, inp, lab, rates) in enumerate(panels):
        for col, (img, title) in enumerate(
            ((inp, "input"), (lab, "label"), (rates, "rates"))
        ):
            ax = axes[row][col]
            ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, aspect="auto",
                      interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(title, fontsize=9)
            if col == 0:
                ax.set_ylabel(image_id, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_quant_report_figure(rows: list[dict], path: str) -> None:
    """Per-layer mantissa rounding error bars."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["max_round_err"] for r in rows], width=0.4, label="max")
    ax.bar(x + 0.2, [r["mean_round_err"] for r in rows], width=0.4, label="mean")
    ax.set_xticks(x)
    ax.set_xticklabels([f'{r["layer"]}:{r["kind"]}' for r in rows], fontsize=8)
    ax.set_ylabel("|w - mant/k|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
