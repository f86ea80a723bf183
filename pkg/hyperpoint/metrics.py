"""Confusion-matrix based accuracy metrics for point labels and label rasters."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pyarrow as pa
import pyarrow.csv as pv

from hyperpoint.exceptions import EvaluationError
from hyperpoint.fuse_io import CSV_WRITE_OPTIONS
from hyperpoint.models import ConfusionMatrix, RasterGrid, Scores

logger = logging.getLogger(__name__)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_label: Optional[int] = 0) -> ConfusionMatrix:
    """Count (ground truth, prediction) pairs; rows are ground truth.

    Samples whose ground truth equals ``ignore_label`` are left out.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction has {pred.size} labels, ground truth has {gt.size}")
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    for name, labels in (("ground truth", gt), ("prediction", pred)):
        bad = keep & ((labels < 0) | (labels >= num_classes))
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise EvaluationError(f"{name} label {labels[idx]} at index {idx} outside [0, {num_classes})",
                                  index=idx)
    flat = num_classes * gt[keep] + pred[keep]
    counts = np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts=counts.astype(np.int64))


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def scores(cm: ConfusionMatrix) -> Scores:
    """OA, per-class P/R/F1/IoU, their means over classes present in ground truth, and Kappa."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise EvaluationError("confusion matrix is empty; nothing to evaluate")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)

    precision = _safe_divide(diag, cols)
    recall = _safe_divide(diag, rows)
    f1 = _safe_divide(2 * precision * recall, precision + recall)
    iou = _safe_divide(diag, rows + cols - diag)
    present = rows > 0

    oa = float(diag.sum() / total)
    expected = float((rows * cols).sum() / total ** 2)
    if expected < 1.0:
        kappa = (oa - expected) / (1.0 - expected)
    else:
        kappa = 1.0 if oa == 1.0 else 0.0

    return Scores(
        overall_accuracy=oa,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        iou=iou.tolist(),
        present_classes=np.flatnonzero(present).tolist(),
        mean_precision=float(precision[present].mean()),
        mean_recall=float(recall[present].mean()),
        mean_f1=float(f1[present].mean()),
        miou=float(iou[present].mean()),
        kappa=float(kappa),
        total=int(total),
    )


def evaluate_labels(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                    ignore_label: Optional[int] = 0) -> Scores:
    return scores(confusion_matrix(pred, gt, num_classes, ignore_label))


def evaluate_2d(pred: RasterGrid, gt: RasterGrid, num_classes: Optional[int] = None) -> Scores:
    """Pixelwise scores of two label rasters on the same grid, skipping nodata in either."""
    if pred.spec.model_dump(exclude={"nodata"}) != gt.spec.model_dump(exclude={"nodata"}):
        raise EvaluationError(f"raster grids differ: {pred.spec} vs {gt.spec}")
    p = pred.values[0].reshape(-1)
    g = gt.values[0].reshape(-1)
    valid = (g != gt.nodata) & (p != pred.nodata)
    if not valid.any():
        raise EvaluationError("no pixel carries a label in both rasters")
    p = p[valid].astype(np.int64)
    g = g[valid].astype(np.int64)
    if num_classes is None:
        num_classes = int(max(p.max(), g.max())) + 1
    logger.info(f"Evaluating {int(valid.sum())} of {valid.size} pixels")
    return scores(confusion_matrix(p, g, num_classes, ignore_label=None))


def format_scores_table(result: Scores, class_names: Optional[Dict[int, str]] = None) -> str:
    """Human-readable per-class and summary table."""
    names = class_names or {}
    lines = [f"{'class':<28}{'precision':>10}{'recall':>10}{'f1':>10}{'iou':>10}"]
    for c in result.present_classes:
        name = names.get(c, str(c))
        lines.append(f"{name:<28}{result.precision[c]:>10.4f}{result.recall[c]:>10.4f}"
                     f"{result.f1[c]:>10.4f}{result.iou[c]:>10.4f}")
    lines.append("-" * 68)
    lines.append(f"{'mean':<28}{result.mean_precision:>10.4f}{result.mean_recall:>10.4f}"
                 f"{result.mean_f1:>10.4f}{result.miou:>10.4f}")
    lines.append(f"OA {result.overall_accuracy:.4f}   Kappa {result.kappa:.4f}   "
                 f"samples {result.total}")
    return "\n".join(lines)


def scores_rows(result: Scores) -> List[Dict[str, Union[str, float]]]:
    rows = [
        {"metric": "overall_accuracy", "value": result.overall_accuracy},
        {"metric": "kappa", "value": result.kappa},
        {"metric": "miou", "value": result.miou},
        {"metric": "mean_f1", "value": result.mean_f1},
        {"metric": "mean_precision", "value": result.mean_precision},
        {"metric": "mean_recall", "value": result.mean_recall},
    ]
    for c in result.present_classes:
        for key in ("precision", "recall", "f1", "iou"):
            rows.append({"metric": f"{key}_{c}", "value": getattr(result, key)[c]})
    return rows


def save_scores_csv(result: Scores, path: Union[str, Path]) -> Path:
    """Write ``metric,value`` rows."""
    path = Path(path)
    rows = scores_rows(result)
    table = pa.table({
        "metric": pa.array([r["metric"] for r in rows], type=pa.string()),
        "value": pa.array([r["value"] for r in rows], type=pa.float64()),
    })
    path.parent.mkdir(parents=True, exist_ok=True)
    pv.write_csv(table, str(path), write_options=CSV_WRITE_OPTIONS)
    return path
