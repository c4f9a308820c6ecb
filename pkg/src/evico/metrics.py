"""Dice, Jaccard, average surface distance and 95% Hausdorff distance.

Distances are in pixel units.  A boundary pixel is a foreground pixel with
a 4-neighbour in the background; pixels outside the image count as
background.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from .errors import EvaluationError, ShapeError, UndefinedMetricError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
CSV_HEADER = ("sample_id", "dice", "jaccard", "asd", "hd95")


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    asd: float | None = None  # None when a mask is empty
    hd95: float | None = None


def _as_masks(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_jaccard(pred, gt):
    pred, gt = _as_masks(pred, gt)
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    total = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


def boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_CROSS, border_value=0)


def directed_distances(src, dst):
    """Euclidean distance from every boundary pixel of ``src`` to the boundary of ``dst``."""
    b_src, b_dst = boundary(src), boundary(dst)
    return distance_transform_edt(~b_dst)[b_src]


def surface_distances(pred, gt, pooled=False):
    """Return ``(asd, hd95)``.

    Default: asd is the mean of the two directed mean distances and hd95 the
    larger of the two directed 95th percentiles.  ``pooled=True`` takes both
    statistics over the concatenated distance sets instead.
    """
    pred, gt = _as_masks(pred, gt)
    if not pred.any() or not gt.any():
        raise UndefinedMetricError("surface distance undefined for an empty mask")
    d_pg = directed_distances(pred, gt)
    d_gp = directed_distances(gt, pred)
    if pooled:
        both = np.concatenate([d_pg, d_gp])
        return float(both.mean()), float(np.percentile(both, 95))
    asd = 0.5 * (d_pg.mean() + d_gp.mean())
    hd95 = max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))
    return float(asd), float(hd95)


def score_pair(pred, gt, pooled=False) -> MetricsReport:
    dice, jac = dice_jaccard(pred, gt)
    try:
        asd, hd95 = surface_distances(pred, gt, pooled)
    except UndefinedMetricError:
        asd = hd95 = None
    return MetricsReport(dice, jac, asd, hd95)


def score_labels(pred_labels, gt_labels, num_classes, pooled=False) -> MetricsReport:
    """Mean of the per-foreground-class reports of one label map pair."""
    reports = [score_pair(pred_labels == c, gt_labels == c, pooled)
               for c in range(1, num_classes)]
    if len(reports) == 1:
        return reports[0]
    asds = [r.asd for r in reports if r.asd is not None]
    hds = [r.hd95 for r in reports if r.hd95 is not None]
    return MetricsReport(
        float(np.mean([r.dice for r in reports])),
        float(np.mean([r.jaccard for r in reports])),
        float(np.mean(asds)) if asds else None,
        float(np.mean(hds)) if hds else None,
    )


@dataclass
class EvalResult:
    rows: list[tuple[int, MetricsReport]]
    mean: MetricsReport   # dice / jaccard as fractions

    @property
    def dice_pct(self):
        return round(100.0 * self.mean.dice, 2)

    @property
    def jaccard_pct(self):
        return round(100.0 * self.mean.jaccard, 2)


def aggregate(rows, allow_undefined=False) -> MetricsReport:
    """Means over samples; undefined distances are left out of their means.

    If no sample has defined distances this raises, unless ``allow_undefined``
    is set, in which case the aggregate distances are None.
    """
    if not rows:
        raise EvaluationError("nothing to aggregate")
    reports = [r for _, r in rows]
    asds = [r.asd for r in reports if r.asd is not None]
    hds = [r.hd95 for r in reports if r.hd95 is not None]
    if not asds and not allow_undefined:
        raise EvaluationError("surface distances undefined for every sample")
    return MetricsReport(
        float(np.mean([r.dice for r in reports])),
        float(np.mean([r.jaccard for r in reports])),
        float(np.mean(asds)) if asds else None,
        float(np.mean(hds)) if hds else None,
    )


def evaluate_set(params, samples, mode="fused", activation="softplus", pooled=False,
                 batch_size=16, allow_undefined=False) -> EvalResult:
    """Score the model's hard predictions on every sample with a mask."""
    from .netmodel import predict

    samples = [s for s in samples if s.mask is not None]
    if not samples:
        raise EvaluationError("test set is empty")
    k = params.num_classes
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        labels, _ = predict(params, np.stack([s.image for s in chunk]), mode, activation)
        for s, lab in zip(chunk, labels):
            rows.append((s.id, score_labels(lab, s.mask, k, pooled)))
    return EvalResult(rows, aggregate(rows, allow_undefined))


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_sample_csv(result: EvalResult, path):
    """Per-sample rows; dice/jaccard as fractions, empty asd/hd95 when undefined."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        for sid, r in result.rows:
            wr.writerow([sid, _fmt(r.dice), _fmt(r.jaccard), _fmt(r.asd), _fmt(r.hd95)])
    return path


def write_aggregate_csv(result: EvalResult, path):
    """One ``mean`` row with dice/jaccard in percent (2 decimals)."""
    path = Path(path)
    m = result.mean
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        wr.writerow(["mean", f"{100 * m.dice:.2f}", f"{100 * m.jaccard:.2f}",
                     "" if m.asd is None else f"{m.asd:.4f}",
                     "" if m.hd95 is None else f"{m.hd95:.4f}"])
    return path


def read_sample_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["sample_id"]), MetricsReport(
                float(rec["dice"]), float(rec["jaccard"]),
                float(rec["asd"]) if rec["asd"] else None,
                float(rec["hd95"]) if rec["hd95"] else None)))
    return rows


def hausdorff(pred, gt):
    """Exact (100th percentile) symmetric Hausdorff distance between boundaries."""
    d1, d2 = directed_distances(pred, gt), directed_distances(gt, pred)
    return float(max(d1.max(), d2.max())) if d1.size and d2.size else math.nan
