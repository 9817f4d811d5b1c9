"""Segmentation quality metrics and paired significance testing."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import directed_hausdorff
from scipy.special import erfc
from scipy.stats import rankdata


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice(pred, truth) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    pred, truth = _check_pair(pred, truth)
    denom = int(pred.sum()) + int(truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(pred, truth).sum()) / denom


def iou(pred, truth) -> float:
    """|A∩B| / |A∪B|; two empty masks count as a perfect match."""
    pred, truth = _check_pair(pred, truth)
    union = int(np.logical_or(pred, truth).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum()) / union


def hausdorff(pred, truth, image_dims: tuple[int, int] | None = None) -> float:
    """Symmetric Hausdorff distance between foreground point sets (pixels).

    When exactly one mask is empty the distance takes the maximum possible
    value, max(H, W); when both are empty it is 0.
    """
    pred, truth = _check_pair(pred, truth)
    h, w = image_dims if image_dims is not None else pred.shape
    p_empty, t_empty = not pred.any(), not truth.any()
    if p_empty and t_empty:
        return 0.0
    if p_empty or t_empty:
        return float(max(h, w))
    pts_a = np.argwhere(pred).astype(float)
    pts_b = np.argwhere(truth).astype(float)
    d_ab = directed_hausdorff(pts_a, pts_b)[0]
    d_ba = directed_hausdorff(pts_b, pts_a)[0]
    return float(max(d_ab, d_ba))


def wilcoxon_signed_rank(scores_a, scores_b) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. Up to 25 non-zero pairs the p-value comes
    from the exact distribution of the rank sum over all sign assignments
    (ties handled through midranks); beyond that a normal approximation
    with tie correction is used.
    """
    a = np.asarray(scores_a, dtype=float).ravel()
    b = np.asarray(scores_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    if a.size < 5:
        raise ValueError(f"need at least 5 pairs, got {a.size}")
    diff = a - b
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        warnings.warn("all paired differences are zero, p = 1.0", RuntimeWarning)
        return 1.0
    ranks = rankdata(np.abs(diff))

    if n <= 25:
        # doubled midranks are integers; exact subset-sum distribution of
        # the positive-rank sum under random signs
        doubled = np.rint(2.0 * ranks).astype(int)
        observed = int(np.rint(2.0 * ranks[diff > 0].sum()))
        counts = [0] * (int(doubled.sum()) + 1)
        counts[0] = 1
        for r in doubled:
            for s in range(len(counts) - 1 - r, -1, -1):
                if counts[s]:
                    counts[s + r] += counts[s]
        total = 1 << n
        p_low = sum(counts[: observed + 1]) / total
        p_high = sum(counts[observed:]) / total
        return min(1.0, 2.0 * min(p_low, p_high))

    w_plus = float(ranks[diff > 0].sum())
    mean_w = n * (n + 1) / 4.0
    var_w = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var_w -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var_w <= 0:
        warnings.warn("degenerate variance in normal approximation, p = 1.0", RuntimeWarning)
        return 1.0
    z = (w_plus - mean_w) / np.sqrt(var_w)
    return min(1.0, float(erfc(abs(z) / np.sqrt(2.0))))


@dataclass
class MetricsReport:
    """Per-image, per-foreground-class metric rows plus box-plot aggregates."""

    rows: list[dict] = field(default_factory=list)
    num_classes: int = 2

    def values(self, metric: str, cls: int | None = None) -> np.ndarray:
        picked = [r[metric] for r in self.rows if cls is None or r["class"] == cls]
        return np.asarray(picked, dtype=float)

    def mean_foreground_dice(self) -> float:
        v = self.values("dice")
        return float(v.mean()) if v.size else float("nan")

    def aggregates(self) -> dict:
        out: dict = {"per_class": {}, "overall": {}}
        for metric in ("dice", "iou", "hausdorff"):
            for cls in range(1, self.num_classes):
                v = self.values(metric, cls)
                if v.size:
                    entry = out["per_class"].setdefault(cls, {})
                    entry[f"{metric}_median"] = float(np.median(v))
                    q1, q3 = np.percentile(v, [25, 75])
                    entry[f"{metric}_iqr"] = float(q3 - q1)
            v = self.values(metric)
            if v.size:
                out["overall"][f"{metric}_median"] = float(np.median(v))
                q1, q3 = np.percentile(v, [25, 75])
                out["overall"][f"{metric}_iqr"] = float(q3 - q1)
        return out

    def to_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["subject", "image", "class", "dice", "iou", "hausdorff"])
            for r in self.rows:
                writer.writerow(
                    [r["subject"], r["image"], r["class"], r["dice"], r["iou"], r["hausdorff"]]
                )

    @staticmethod
    def from_csv(path: Path | str) -> "MetricsReport":
        rows = []
        max_cls = 1
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                row = {
                    "subject": rec["subject"],
                    "image": int(rec["image"]),
                    "class": int(rec["class"]),
                    "dice": float(rec["dice"]),
                    "iou": float(rec["iou"]),
                    "hausdorff": float(rec["hausdorff"]),
                }
                max_cls = max(max_cls, row["class"])
                rows.append(row)
        return MetricsReport(rows=rows, num_classes=max_cls + 1)


def build_report(
    predictions,
    truths,
    num_classes: int,
    subjects: list[str] | None = None,
    indices: list[int] | None = None,
) -> MetricsReport:
    """Score argmax-decoded predictions against dense label maps.

    One row per image per foreground class, each class binarised one-hot.
    """
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    subjects = subjects or [f"img{i:04d}" for i in range(len(predictions))]
    indices = indices or list(range(len(predictions)))
    rows = []
    for pred, truth, subject, idx in zip(predictions, truths, subjects, indices):
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"{subject}: prediction/label shape mismatch")
        for cls in range(1, num_classes):
            p = pred == cls
            t = truth == cls
            rows.append(
                {
                    "subject": subject,
                    "image": idx,
                    "class": cls,
                    "dice": dice(p, t),
                    "iou": iou(p, t),
                    "hausdorff": hausdorff(p, t),
                }
            )
    return MetricsReport(rows=rows, num_classes=num_classes)
