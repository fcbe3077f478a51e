"""Cell classification accuracy and speed-bucketed motion error."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .voxelizer import CLASS_NAMES, NUM_CLASSES

BUCKETS = ("static", "slow", "fast")
SLOW_LIMIT = 5.0  # m/s; slow is (0, 5], fast is > 5


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None,
                     num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    if mask is not None:
        pred, gt = pred[mask], gt[mask]
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def accuracies_from_confusion(cm: np.ndarray):
    """(per_class_acc with None for absent classes, OA, MCA)."""
    support = cm.sum(axis=1)
    per_class = [float(cm[c, c] / support[c]) if support[c] else None for c in range(len(cm))]
    total = cm.sum()
    oa = float(np.trace(cm) / total) if total else None
    present = [a for a in per_class if a is not None]
    mca = float(np.mean(present)) if present else None
    return per_class, oa, mca


def classification_metrics(pred_class, gt_class, eval_mask=None, num_classes: int = NUM_CLASSES):
    return accuracies_from_confusion(confusion_matrix(pred_class, gt_class, eval_mask, num_classes))


def speed_bucket(speed: np.ndarray) -> np.ndarray:
    """0 = static (exactly 0), 1 = slow (<= 5 m/s), 2 = fast."""
    speed = np.asarray(speed)
    return np.where(speed == 0, 0, np.where(speed <= SLOW_LIMIT, 1, 2))


def last_step_errors(pred_motion: np.ndarray, gt_motion: np.ndarray) -> np.ndarray:
    """Euclidean error at the final horizon step; inputs (..., T, H, W, 2)."""
    return np.linalg.norm(np.asarray(pred_motion, dtype=np.float64)[..., -1, :, :, :]
                          - np.asarray(gt_motion, dtype=np.float64)[..., -1, :, :, :], axis=-1)


def lower_median(values: np.ndarray) -> float:
    """Median taking the lower middle element for even counts."""
    s = np.sort(values)
    return float(s[(len(s) - 1) // 2])


def bucket_stats(errors: np.ndarray) -> dict:
    if len(errors) == 0:
        return {"mean_err_m": None, "median_err_m": None, "cell_count": 0}
    return {"mean_err_m": float(np.mean(errors)), "median_err_m": lower_median(errors),
            "cell_count": int(len(errors))}


def motion_metrics(pred_motion_gated, gt_motion, gt_speed, mask) -> Dict[str, dict]:
    """Per-bucket mean/median last-step error over ``mask`` (foreground) cells."""
    err = last_step_errors(pred_motion_gated, gt_motion)
    mask = np.asarray(mask, dtype=bool)
    if np.any(np.asarray(gt_speed)[mask] < 0):
        raise ValueError("speeds must be non-negative")
    buckets = speed_bucket(gt_speed)
    return {name: bucket_stats(err[mask & (buckets == i)]) for i, name in enumerate(BUCKETS)}


@dataclass
class MetricsReport:
    per_class_acc: List[Optional[float]]
    oa: Optional[float]
    mca: Optional[float]
    buckets: Dict[str, dict]
    clip_count: int = 0
    per_clip: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_acc": dict(zip(CLASS_NAMES, self.per_class_acc)),
            "OA": self.oa,
            "MCA": self.mca,
            "buckets": self.buckets,
            "clip_count": self.clip_count,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def row(self) -> List[str]:
        cells = []
        for b in BUCKETS:
            for key in ("mean_err_m", "median_err_m"):
                v = self.buckets[b][key]
                cells.append("-" if v is None else f"{v:.4f}")
        for a in self.per_class_acc + [self.mca, self.oa]:
            cells.append("-" if a is None else f"{100 * a:.1f}")
        return cells

    def to_table(self, label: str = "Ours") -> str:
        return format_table([(label, self)])


HEADER_TOP = ["Static (speed = 0)", "Slow (speed <= 5m/s)", "Fast (speed > 5m/s)"]
COLUMNS = ["Mean", "Median"] * 3 + ["Background", "Vehicle", "Ped.", "Bike", "Others", "MCA", "OA"]


def format_table(rows, extra_columns: Optional[List[str]] = None, extra_values=None) -> str:
    """Aligned text table: motion error (m) per bucket, then cell accuracy (%)."""
    extra_columns = extra_columns or []
    header = ["Method"] + extra_columns + COLUMNS
    body = []
    for i, (label, report) in enumerate(rows):
        extra = [str(v) for v in (extra_values[i] if extra_values else [])]
        body.append([label] + extra + report.row())
    widths = [max(len(r[j]) for r in [header] + body) for j in range(len(header))]
    first = 1 + len(extra_columns)
    for k, h in enumerate(HEADER_TOP):
        # each mean/median pair must be wide enough for its group label
        mean, median = first + 2 * k, first + 2 * k + 1
        widths[median] = max(widths[median], len(h) + 1 - widths[mean] - 2)
    lead = sum(widths[:first]) + 2 * first
    pair = [widths[first + 2 * k] + widths[first + 2 * k + 1] + 4 for k in range(3)]
    title = " " * lead + "Motion Prediction (m)".ljust(sum(pair)) + "Cell Classification (%)"
    groups = " " * lead + "".join(h.ljust(w) for h, w in zip(HEADER_TOP, pair))
    lines = [title, groups.rstrip()]
    for r in [header] + body:
        lines.append("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


class MetricsAccumulator:
    """Associative merge of per-clip confusion counts and per-bucket errors."""

    def __init__(self, num_classes: int = NUM_CLASSES):
        self.cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.errors = {b: [] for b in BUCKETS}
        self.clips = 0
        self.per_clip: List[dict] = []

    def add(self, pred_class, gt_class, pred_motion_gated, gt_motion, gt_speed,
            class_mask=None, clip_id=None) -> None:
        cm = confusion_matrix(pred_class, gt_class, class_mask, len(self.cm))
        self.cm += cm
        fg = np.asarray(gt_class) != 0
        err = last_step_errors(pred_motion_gated, gt_motion)
        buckets = speed_bucket(gt_speed)
        for i, name in enumerate(BUCKETS):
            self.errors[name].append(err[fg & (buckets == i)])
        self.clips += 1
        if clip_id is not None:
            _, oa, mca = accuracies_from_confusion(cm)
            self.per_clip.append({"clip": clip_id, "OA": oa, "MCA": mca})

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        self.cm += other.cm
        for b in BUCKETS:
            self.errors[b].extend(other.errors[b])
        self.clips += other.clips
        self.per_clip.extend(other.per_clip)
        return self

    def report(self) -> MetricsReport:
        per_class, oa, mca = accuracies_from_confusion(self.cm)
        buckets = {b: bucket_stats(np.concatenate(self.errors[b]) if self.errors[b] else np.zeros(0))
                   for b in BUCKETS}
        return MetricsReport(per_class, oa, mca, buckets, self.clips, list(self.per_clip))
