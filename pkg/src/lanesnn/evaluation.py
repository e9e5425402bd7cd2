"""Segmentation scoring on firing-rate maps.

Predictions are per-pixel firing rates in [0, 1]; a pixel counts as lane when
its rate is strictly greater than the decision threshold. Each image gets its
own F-measure-optimal threshold picked from the midpoints of the rate
quantization grid; reported IoU uses the mean of those per-image thresholds,
applied uniformly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .dataset import write_pgm

__all__ = [
    "confusion",
    "precision_recall",
    "f_measure",
    "threshold_candidates",
    "best_threshold",
    "iou",
    "EvalRow",
    "EvalReport",
    "evaluate",
    "fmt_num",
    "write_csv",
    "write_report_csv",
    "write_pr_csv",
    "save_rate_masks",
]


def confusion(rates: np.ndarray, label: np.ndarray, th: float) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with the strict decision rule rate > th."""
    pred = rates > th
    truth = label > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return tp, fp, fn, tn


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall


def f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def threshold_candidates(steps: int) -> list[float]:
    """Midpoints between adjacent attainable rates (i/steps), plus 1.0.

    The first candidate sits below 0 so that "predict every pixel" is part of
    the sweep; the last (1.0) yields an empty prediction because the decision
    is strict.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    return [(i - 0.5) / steps for i in range(steps + 1)] + [1.0]


def best_threshold(rates: np.ndarray, label: np.ndarray, steps: int) -> tuple[float, float]:
    """Candidate threshold maximizing F; ties resolve to the smallest one."""
    best_th = None
    best_f = -1.0
    for th in threshold_candidates(steps):
        tp, fp, fn, _ = confusion(rates, label, th)
        f = f_measure(*precision_recall(tp, fp, fn))
        if f > best_f:
            best_f = f
            best_th = th
    return best_th, best_f


def iou(rates: np.ndarray, label: np.ndarray, th: float) -> float:
    """Intersection over union of the thresholded prediction and the label.

    An empty union (no lane pixels predicted or labeled) scores 1.0: the
    prediction is exactly right.
    """
    tp, fp, fn, _ = confusion(rates, label, th)
    union = tp + fp + fn
    if union == 0:
        return 1.0
    return tp / union


@dataclass
class EvalRow:
    image_id: str
    best_th: float
    best_f: float
    iou_at_mean_th: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_best_th: float
    mean_iou: float
    pr_curve: list[tuple[float, float, float, float]]
    steps: int


def evaluate(
    preds: list[tuple[str, np.ndarray]], labels: list[np.ndarray], steps: int
) -> EvalReport:
    """Score a set of images.

    Per image: find the F-optimal threshold. Across images: average those
    thresholds, then score every image's IoU at that shared mean threshold.
    The precision/recall curve pools confusion counts over all images at each
    candidate threshold.
    """
    if len(preds) != len(labels):
        raise ValueError("preds and labels must have the same length")
    if not preds:
        raise ValueError("preds must not be empty")

    per_image = []
    for (image_id, rates), label in zip(preds, labels):
        th, f = best_threshold(rates, label, steps)
        per_image.append((image_id, rates, label, th, f))

    mean_th = float(np.mean([th for (_, _, _, th, _) in per_image]))
    rows = []
    ious = []
    for image_id, rates, label, th, f in per_image:
        v = iou(rates, label, mean_th)
        ious.append(v)
        rows.append(EvalRow(image_id=image_id, best_th=th, best_f=f, iou_at_mean_th=v))

    pr_curve = []
    for th in threshold_candidates(steps):
        tp = fp = fn = 0
        for _, rates, label, _, _ in per_image:
            a, b, c, _ = confusion(rates, label, th)
            tp += a
            fp += b
            fn += c
        p, r = precision_recall(tp, fp, fn)
        pr_curve.append((th, p, r, f_measure(p, r)))

    return EvalReport(
        rows=rows,
        mean_best_th=mean_th,
        mean_iou=float(np.mean(ious)),
        pr_curve=pr_curve,
        steps=steps,
    )


# ---------------------------------------------------------------------------
# Delimited output
# ---------------------------------------------------------------------------

def fmt_num(x) -> str:
    return format(float(x), ".6g")


def write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    """Comma-separated, one header row, LF line endings."""
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def write_report_csv(report: EvalReport, path: str) -> None:
    rows = [
        [r.image_id, fmt_num(r.best_th), fmt_num(r.iou_at_mean_th)] for r in report.rows
    ]
    rows.append(["mean", fmt_num(report.mean_best_th), fmt_num(report.mean_iou)])
    write_csv(path, ["image_id", "best_th", "iou_at_mean_th"], rows)


def write_pr_csv(report: EvalReport, path: str) -> None:
    rows = [
        [fmt_num(th), fmt_num(p), fmt_num(r), fmt_num(f)]
        for th, p, r, f in report.pr_curve
    ]
    write_csv(path, ["threshold", "precision", "recall", "f_measure"], rows)


def save_rate_masks(
    preds: list[tuple[str, np.ndarray]],
    shape: tuple[int, int],
    mean_th: float,
    out_dir: str,
) -> None:
    """Per image: rate map scaled to 0..255, and the binary decision at the
    shared threshold (suffix .bin.pgm)."""
    os.makedirs(out_dir, exist_ok=True)
    for image_id, rates in preds:
        img = rates.reshape(shape)
        write_pgm(
            os.path.join(out_dir, f"{image_id}.pgm"),
            np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8),
        )
        write_pgm(
            os.path.join(out_dir, f"{image_id}.bin.pgm"),
            ((img > mean_th).astype(np.uint8) * 255),
        )
