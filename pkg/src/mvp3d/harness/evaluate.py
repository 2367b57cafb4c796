"""Inference over a dataset and metric reporting."""

from __future__ import annotations

import json

import numpy as np

from .. import autodiff as ad
from ..metrics import DEFAULT_THRESHOLDS, EvalRecord, evaluate_records, write_metrics_csv, write_predictions_jsonl
from ..model.network import MvPNetwork
from ..scenegen import template_for
from ..setmatch import PoseSet
from .parallel import ordered_map


def infer_scenes(net: MvPNetwork, scenes, workers: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Final-layer ``(poses, confidences)`` per scene, computed in parallel, merged in order."""
    for s in scenes:
        net.check_inputs(s.features, s.feature_cameras())
    # graph recording is a process-wide switch; flip it once outside the pool
    with ad.no_grad():
        return ordered_map(net.predict_scene, scenes, workers)


def build_records(predictions, scenes, threshold: float) -> list[EvalRecord]:
    return [EvalRecord(PoseSet(p, c).filter(threshold), s.gt_poses, i)
            for i, ((p, c), s) in enumerate(zip(predictions, scenes))]


def evaluate(net: MvPNetwork, scenes, thresholds=DEFAULT_THRESHOLDS, confidence_threshold: float = 0.1,
             workers: int | None = None):
    """Returns ``(rows, records)``; rows are ``(metric, threshold, value)``."""
    preds = infer_scenes(net, scenes, workers)
    records = build_records(preds, scenes, confidence_threshold)
    J = net.config.J
    try:
        limbs = template_for(J).limbs
    except ValueError:
        limbs = None
    return evaluate_records(records, thresholds, limbs), records


def write_eval(rows, records, csv_path, jsonl_path=None) -> None:
    write_metrics_csv(rows, csv_path)
    if jsonl_path is not None:
        write_predictions_jsonl(records, jsonl_path)


def write_inference_jsonl(predictions, path) -> None:
    with open(path, "w") as fh:
        for i, (poses, conf) in enumerate(predictions):
            fh.write(json.dumps({"scene": i, "poses": np.round(poses, 9).tolist(),
                                 "confidences": np.round(conf, 9).tolist()}) + "\n")
