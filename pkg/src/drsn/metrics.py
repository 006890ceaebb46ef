"""Pixel accuracy and the two-class confusion report.

Target pixels are the positive class. The report rows are normalised per
true class, so each row reads as (% predicted target, % predicted background).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drsn.errors import DimensionError, InputError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        """Pixel-weighted accuracy (tp + tn) / total."""
        return (self.tp + self.tn) / self.total if self.total else float("nan")


def _check_masks(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(m, (0, 1)).all():
            raise InputError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def pixel_accuracy(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Fraction of pixels whose predicted class equals the ground truth."""
    pred, gt = _check_masks(pred_mask, gt_mask)
    return int(np.count_nonzero(pred == gt)) / pred.size


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    pred, gt = _check_masks(pred_mask, gt_mask)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _row(hit: int, miss: int) -> tuple[float, float] | None:
    total = hit + miss
    if total == 0:
        return None
    return 100.0 * hit / total, 100.0 * miss / total


def report_rows(counts: ConfusionCounts):
    """Percentages as (target row, background row); a row is None when empty.

    Target row is (predicted target, predicted background) for true target
    pixels; background row likewise for true background pixels.
    """
    target = _row(counts.tp, counts.fn)
    bg = _row(counts.tn, counts.fp)
    background = None if bg is None else (bg[1], bg[0])
    return target, background


def class_averaged_accuracy(counts: ConfusionCounts) -> float:
    target, background = report_rows(counts)
    recalls = [r for r in (target and target[0], background and background[1]) if r is not None]
    return sum(recalls) / len(recalls) / 100.0 if recalls else float("nan")


def _cell(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def format_table(target: tuple[float, float] | None,
                 background: tuple[float, float] | None,
                 overall: float | None, class_avg: float | None = None) -> str:
    """Render the two-row table; percentages in, text out."""
    lines = [f"{'Pixel accuracy':<16}{'Target':>10}{'Background':>12}"]
    for name, row in (("Target", target), ("Background", background)):
        a, b = row if row is not None else (None, None)
        lines.append(f"{name:<16}{_cell(a):>10}{_cell(b):>12}")
    lines.append(f"Overall pixel accuracy: {_cell(overall)}%")
    if class_avg is not None:
        lines.append(f"Class-averaged accuracy: {_cell(class_avg)}%")
    return "\n".join(lines)


def confusion_report(counts: ConfusionCounts) -> str:
    target, background = report_rows(counts)
    overall = 100.0 * counts.accuracy if counts.total else None
    avg = class_averaged_accuracy(counts)
    return format_table(target, background, overall, None if np.isnan(avg) else 100.0 * avg)


def confusion_csv(counts: ConfusionCounts) -> str:
    target, background = report_rows(counts)
    lines = ["class,correct_pct,wrong_pct"]
    lines.append("target," + (",".join(_cell(v) for v in target) if target else "n/a,n/a"))
    if background:
        lines.append(f"background,{_cell(background[1])},{_cell(background[0])}")
    else:
        lines.append("background,n/a,n/a")
    return "\n".join(lines) + "\n"
