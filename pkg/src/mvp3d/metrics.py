"""AP / Recall at MPJPE thresholds, MPJPE and PCP.

Matching protocol for AP and Recall: all predictions in the dataset are sorted
by descending confidence; each one takes the nearest still-unmatched GT person
of its own scene, and counts as a true positive if that MPJPE is below the
threshold. AP is the area under the precision/recall curve with all-point
interpolation (precision replaced by its running maximum from the right).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .setmatch import PoseSet

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (25, 50, 75, 100, 125, 150, 250, 500)


class EmptyDatasetError(ValueError):
    pass


def mpjpe(pred, gt) -> float:
    """Mean per-joint Euclidean error in millimeters (inputs in meters)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)) * 1000.0)


@dataclass
class EvalRecord:
    """Predictions (already confidence-filtered) and GT of one scene."""

    pred: PoseSet
    gt: np.ndarray  # [N_gt, J, 3]
    scene_id: int = 0
    # filled by match_records
    matches: dict = field(default_factory=dict)


def _pairwise_mpjpe(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros((len(pred), len(gt)))
    return np.linalg.norm(pred[:, None] - gt[None], axis=-1).mean(axis=-1) * 1000.0


def match_records(records: Sequence[EvalRecord], threshold: float):
    """Greedy confidence-ordered matching over the whole dataset.

    Returns ``(tp_flags, confidences, errors, n_gt)`` with one entry per
    prediction in ranked order; ``errors`` holds the MPJPE of true positives
    (NaN for false positives).
    """
    entries = []
    dists = []
    for r_i, rec in enumerate(records):
        dists.append(_pairwise_mpjpe(rec.pred.poses, np.asarray(rec.gt)))
        for p_i, c in enumerate(rec.pred.confidences):
            entries.append((-float(c), r_i, p_i))
    entries.sort()
    taken = [np.zeros(len(r.gt), dtype=bool) for r in records]
    tp, conf, err = [], [], []
    for negc, r_i, p_i in entries:
        d = dists[r_i][p_i] if len(taken[r_i]) else np.zeros(0)
        free = np.flatnonzero(~taken[r_i])
        hit = False
        if free.size:
            g = free[np.argmin(d[free])]
            if d[g] < threshold:
                taken[r_i][g] = True
                hit = True
                err.append(float(d[g]))
        if not hit:
            err.append(math.nan)
        tp.append(hit)
        conf.append(-negc)
    n_gt = int(sum(len(r.gt) for r in records))
    return np.asarray(tp, dtype=bool), np.asarray(conf), np.asarray(err), n_gt


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_recall(records: Sequence[EvalRecord], threshold: float) -> tuple[float, float]:
    if not records:
        raise EmptyDatasetError("no scenes to evaluate")
    tp, _, _, n_gt = match_records(records, threshold)
    recall = float(tp.sum() / n_gt) if n_gt else 0.0
    return average_precision(tp, n_gt), recall


def mean_mpjpe(records: Sequence[EvalRecord], threshold: float = 500.0) -> float:
    """MPJPE averaged over true positives at ``threshold``; NaN if there are none."""
    if not records:
        raise EmptyDatasetError("no scenes to evaluate")
    tp, _, err, _ = match_records(records, threshold)
    return float(np.mean(err[tp])) if tp.any() else math.nan


def pcp(pred: PoseSet | np.ndarray, gt: np.ndarray, limbs: Iterable[tuple[int, int]], factor: float = 0.5) -> float:
    """Fraction of GT limbs whose endpoint errors average <= factor * limb length.

    Each GT person is compared with the prediction whose root joint is closest.
    Zero-length GT limbs are skipped.
    """
    poses = pred.poses if isinstance(pred, PoseSet) else np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    limbs = list(limbs)
    correct = total = 0
    for person in gt:
        if len(poses) == 0:
            total += len(limbs)
            continue
        best = poses[np.argmin(np.linalg.norm(poses[:, 0] - person[0], axis=-1))]
        for a, b in limbs:
            length = np.linalg.norm(person[a] - person[b])
            if length == 0:
                log.warning("skipping zero-length limb (%d, %d)", a, b)
                continue
            err = 0.5 * (np.linalg.norm(best[a] - person[a]) + np.linalg.norm(best[b] - person[b]))
            total += 1
            # tiny slack so exact boundary cases survive rounding
            if err <= factor * length * (1 + 1e-12):
                correct += 1
    return correct / total if total else math.nan


def evaluate_records(records: Sequence[EvalRecord], thresholds=DEFAULT_THRESHOLDS, limbs=None) -> list[tuple]:
    """Rows ``(metric, threshold, value)`` for AP/Recall per threshold, MPJPE and PCP."""
    rows = []
    for t in thresholds:
        ap, rec = ap_recall(records, t)
        rows.append(("AP", t, ap))
        rows.append(("Recall", t, rec))
    if 500 not in thresholds:
        rows.append(("Recall", 500, ap_recall(records, 500)[1]))
    rows.append(("MPJPE", 500, mean_mpjpe(records, 500)))
    if limbs is not None:
        vals = [pcp(r.pred, r.gt, limbs) for r in records if len(r.gt)]
        vals = [v for v in vals if not math.isnan(v)]
        rows.append(("PCP", 0.5, float(np.mean(vals)) if vals else math.nan))
    return rows


def format_value(v: float) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "threshold", "value"])
        for metric, thr, val in rows:
            w.writerow([metric, f"{thr:g}", format_value(val)])


def write_predictions_jsonl(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "scene": rec.scene_id,
                "poses": np.round(rec.pred.poses, 9).tolist(),
                "confidences": np.round(rec.pred.confidences, 9).tolist(),
                "n_gt": int(len(rec.gt)),
            }) + "\n")
