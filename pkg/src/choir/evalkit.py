"""Contact and affordance metrics plus whole-dataset evaluation.

Contact: precision / recall / F1 pooled over frames and vertices, and the
mean edge-graph geodesic distance (cm) from predicted to ground-truth
vertices. Affordance: AUC (rank statistic), thresholded IoU averaged over a
fixed grid, and histogram-intersection similarity of unit-mass maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, ShapeMismatch
from .geometry import TemplateMesh, geodesic_error

AIOU_THRESHOLDS = tuple(i / 100.0 for i in range(1, 100))


@dataclass
class ContactMetrics:
    precision: float
    recall: float
    f1: float
    geo_cm: float
    empty_prediction: bool


@dataclass
class AffordanceMetrics:
    auc: float | None
    aiou: float
    sim: float | None


def contact_metrics(pred: np.ndarray, gt: np.ndarray, mesh: TemplateMesh,
                    threshold: float = 0.5) -> ContactMetrics:
    """Binarize at `threshold`, pool counts over all frames, and average the
    per-frame geodesic error over frames where both sets are nonempty."""
    pred = np.asarray(pred, dtype=np.float64)
    gt_b = np.asarray(gt, dtype=bool)
    if pred.shape != gt_b.shape:
        raise ShapeMismatch(f"contact_metrics: prediction {pred.shape} vs ground truth {gt_b.shape}")
    pred_b = pred > threshold
    tp = int(np.logical_and(pred_b, gt_b).sum())
    fp = int(np.logical_and(pred_b, ~gt_b).sum())
    fn = int(np.logical_and(~pred_b, gt_b).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    geo_values = []
    any_pred = False
    for t in range(pred_b.shape[0]):
        p_idx = np.flatnonzero(pred_b[t])
        g_idx = np.flatnonzero(gt_b[t])
        if p_idx.size == 0:
            continue
        any_pred = True
        if g_idx.size == 0:
            continue
        value, _ = geodesic_error(p_idx, g_idx, mesh)
        geo_values.append(value)
    geo = float(np.mean(geo_values)) if geo_values else 0.0
    return ContactMetrics(precision=precision, recall=recall, f1=f1,
                          geo_cm=geo, empty_prediction=not any_pred)


def auc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Rank (Mann-Whitney) form of the ROC area; ties count one half."""
    scores = np.asarray(pred, dtype=np.float64).reshape(-1)
    labels = np.asarray(gt, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"auc: {scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataFormatError("auc: single-class ground truth")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def aiou(pred: np.ndarray, gt: np.ndarray, thresholds=AIOU_THRESHOLDS) -> float:
    """IoU of (pred >= t) against (gt > 0), averaged over the threshold grid.

    A threshold where both sets are empty counts as IoU 1; an empty
    intersection-free union counts as 0.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ShapeMismatch(f"aiou: {p.shape} prediction vs {g.shape} ground truth")
    gt_set = g > 0.0
    total = 0.0
    for t in thresholds:
        pred_set = p >= t
        union = int(np.logical_or(pred_set, gt_set).sum())
        if union == 0:
            total += 1.0
            continue
        inter = int(np.logical_and(pred_set, gt_set).sum())
        total += inter / union
    return float(total / len(thresholds))


def sim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Histogram intersection of the two maps normalized to unit mass."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    q = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ShapeMismatch(f"sim: {p.shape} prediction vs {q.shape} ground truth")
    if np.any(p < 0) or np.any(q < 0):
        raise DataFormatError("sim: maps must be non-negative")
    ps, qs = p.sum(), q.sum()
    if ps <= 0 or qs <= 0:
        raise DataFormatError("sim: all-zero map")
    return float(np.minimum(p / ps, q / qs).sum())


# -- dataset-level evaluation ---------------------------------------------------


def evaluate_sample(outputs, sample, mesh: TemplateMesh, gt_contact_window: np.ndarray) -> dict:
    """Metrics for one sample; affordance AUC/SIM may be excluded (None)."""
    cm = contact_metrics(outputs.phi_c.data, gt_contact_window, mesh)
    gt_aff = sample.gt_affordance
    pred_aff = outputs.phi_a.data
    row = {
        "class_index": sample.spec.class_index,
        "class_name": sample.spec.class_name,
        "mode": sample.spec.mode,
        "precision": cm.precision,
        "recall": cm.recall,
        "f1": cm.f1,
        "geo_cm": cm.geo_cm,
        "empty_prediction": cm.empty_prediction,
        "aiou": aiou(pred_aff, gt_aff),
        "auc": None,
        "sim": None,
        "top1_correct": int(int(np.argmax(outputs.phi_s.data)) == sample.spec.class_index),
    }
    labels = gt_aff > 0.0
    if 0 < labels.sum() < labels.size:
        row["auc"] = auc(pred_aff, labels)
    if pred_aff.sum() > 0 and gt_aff.sum() > 0:
        row["sim"] = sim(pred_aff, gt_aff)
    return row


def aggregate_rows(rows: list[dict]) -> dict:
    """Unweighted mean over samples; AUC/SIM average only valid entries."""
    if not rows:
        raise DataFormatError("evaluate: empty dataset")
    agg = {"n_samples": len(rows)}
    for key in ("precision", "recall", "f1", "geo_cm", "aiou"):
        agg[key] = float(np.mean([r[key] for r in rows]))
    for key in ("auc", "sim"):
        valid = [r[key] for r in rows if r[key] is not None]
        agg[key] = float(np.mean(valid)) if valid else None
        agg[f"n_excluded_{key}"] = len(rows) - len(valid)
    agg["top1_acc"] = float(np.mean([r["top1_correct"] for r in rows]))
    return agg


def per_class_table(rows: list[dict], class_names) -> list[dict]:
    table = []
    for ci, name in enumerate(class_names):
        subset = [r for r in rows if r["class_index"] == ci]
        entry = {"class_index": ci, "class_name": name, "n": len(subset)}
        if subset:
            entry.update({k: v for k, v in aggregate_rows(subset).items() if k != "n_samples"})
        table.append(entry)
    return table
