"""
mAP@0.5 and mAP@0.5:0.95 with all-point interpolation.

Detections of one class are ranked by score, ties broken by (image id,
x1, y1, x2, y2) so the result does not depend on the order images or
detections are supplied in.  Each detection greedily takes the unmatched
ground truth of its image with the highest IoU at or above the threshold.

AP values and their means are accumulated as exact fractions and rounded to
float once, so reported numbers are correctly rounded and independent of
summation order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .boxes import Box, Detection, iou_matrix

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class PRCurve:
    class_id: int
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    num_gt: int


@dataclass
class MapResult:
    map50: float
    map50_95: float
    precision: float
    recall: float
    f1: float
    best_score: float
    ap: dict = field(default_factory=dict)          # class -> {threshold: ap}
    flagged: list = field(default_factory=list)     # classes predicted but absent from GT
    curves: dict = field(default_factory=dict)      # class -> PRCurve at IoU 0.5

    def as_dict(self):
        return {
            "map50": self.map50, "map50_95": self.map50_95,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "best_score": self.best_score,
            "ap": {str(c): {f"{t:.2f}": v for t, v in per.items()} for c, per in sorted(self.ap.items())},
            "flagged": list(self.flagged),
        }


def _normalize(items):
    if isinstance(items, Mapping):
        return dict(items)
    return dict(enumerate(items))


def _gt_pair(g):
    return (g[0], int(g[1])) if isinstance(g, tuple) else (g.box, int(g.class_id))


def average_precision(recall, precision):
    """All-point interpolated area under the precision envelope."""
    if len(recall) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def exact_average_precision(tp, num_gt) -> Fraction:
    """All-point AP from ranked TP flags: each TP adds 1/num_gt times the best precision at or below it."""
    if not num_gt:
        return Fraction(0)
    ctp = np.cumsum(tp)
    envelope, total = Fraction(0), Fraction(0)
    for k in range(len(tp) - 1, -1, -1):
        envelope = max(envelope, Fraction(int(ctp[k]), k + 1))
        if tp[k]:
            total += envelope
    return total / num_gt


def _rank_key(image_id, det):
    b = det.box
    return (-det.score, image_id, b.x1, b.y1, b.x2, b.y2)


def match_class(preds, gts, class_id, threshold):
    """Greedy matching for one class; returns (scores, tp flags, number of GT)."""
    gt_boxes = {}
    for img, items in gts.items():
        boxes = [b for b, c in (_gt_pair(g) for g in items) if c == class_id]
        if boxes:
            gt_boxes[img] = np.array([b.as_array() for b in boxes])
    num_gt = sum(len(v) for v in gt_boxes.values())
    ranked = sorted(((img, d) for img, ds in preds.items() for d in ds if d.class_id == class_id),
                    key=lambda t: _rank_key(*t))
    used = {img: np.zeros(len(v), dtype=bool) for img, v in gt_boxes.items()}
    scores = np.array([d.score for _, d in ranked], dtype=np.float64)
    tp = np.zeros(len(ranked), dtype=bool)
    for k, (img, det) in enumerate(ranked):
        if img not in gt_boxes:
            continue
        ious = iou_matrix(det.box.as_array(), gt_boxes[img])[0]
        ious = np.where(used[img] | (ious < threshold), -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= 0:
            used[img][j] = True
            tp[k] = True
    return scores, tp, num_gt


def _pr(tp, num_gt):
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt if num_gt else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def evaluate_map(preds, gts, thresholds=COCO_THRESHOLDS, num_classes=None) -> MapResult:
    """Score per-image detections against per-image ground truth.

    ``preds`` maps image id -> list of :class:`Detection`; ``gts`` maps image id
    -> list of ``(Box, class_id)``.  Plain sequences are indexed by position.
    """
    preds, gts = _normalize(preds), _normalize(gts)
    thresholds = tuple(float(t) for t in thresholds)
    evaluated = sorted(set(thresholds) | {0.5})
    classes = {d.class_id for ds in preds.values() for d in ds}
    classes |= {_gt_pair(g)[1] for gs in gts.values() for g in gs}
    if num_classes is not None:
        classes |= set(range(num_classes))
    classes = sorted(classes)

    ap, exact, flagged, curves = {}, {}, [], {}
    pooled_scores, pooled_tp, total_gt = [], [], 0
    for c in classes:
        per = {}
        for t in evaluated:
            scores, tp, num_gt = match_class(preds, gts, c, t)
            recall, precision = _pr(tp, num_gt)
            per[t] = exact_average_precision(tp, num_gt)
            if t == 0.5:
                curves[c] = PRCurve(c, recall, precision, scores, num_gt)
                pooled_scores.append(scores)
                pooled_tp.append(tp)
                total_gt += num_gt
        if curves[c].num_gt == 0 and len(curves[c].scores):
            flagged.append(c)
        exact[c] = per
        ap[c] = {t: float(v) for t, v in per.items()}

    # classes with neither predictions nor ground truth carry no information
    counted = [c for c in classes if curves[c].num_gt or len(curves[c].scores)]

    def mean_ap(ts):
        vals = [sum(exact[c][t] for t in ts) / len(ts) for c in counted]
        return float(sum(vals) / len(vals)) if vals else 0.0

    map50 = mean_ap([0.5])
    map_all = mean_ap(thresholds)
    p, r, f1, best = _best_f1(pooled_scores, pooled_tp, total_gt)
    return MapResult(map50, map_all, p, r, f1, best, ap, flagged, curves)


def _best_f1(score_lists, tp_lists, total_gt):
    if not score_lists or not sum(len(s) for s in score_lists) or total_gt == 0:
        return 0.0, 0.0, 0.0, 0.0
    scores = np.concatenate(score_lists)
    tp = np.concatenate(tp_lists)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    # evaluate only at the last detection of each distinct score
    last = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    ctp = np.cumsum(tp)[last]
    n = last + 1
    precision = ctp / n
    recall = ctp / total_gt
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    k = int(np.argmax(f1))
    return float(precision[k]), float(recall[k]), float(f1[k]), float(scores[last[k]])


def detections_from_arrays(boxes, scores, classes) -> list:
    return [Detection(Box(*map(float, b)), int(c), float(s)) for b, s, c in zip(boxes, scores, classes)]
