"""
Box geometry, GIoU with analytic gradients, Soft-NMS and target assignment.

Zero-area conventions: a pair whose union is empty has IoU 0; a pair whose
enclosing rectangle is empty has no enclosure penalty, so its GIoU is 0 too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValidationError(f"box has non-finite coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(f"box corners out of order: {coords}")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def center(self):
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def shifted(self, dx, dy):
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class SoftNmsConfig:
    theta: float = 0.5
    score_floor: float = 1e-3
    per_class: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta}")
        if not 0.0 <= self.score_floor < 1.0:
            raise ConfigError(f"score_floor must lie in [0, 1), got {self.score_floor}")


# ---------------------------------------------------------------------------
# overlap measures
# ---------------------------------------------------------------------------

def _as_rows(a):
    a = np.asarray(a.as_array() if isinstance(a, Box) else a, dtype=np.float64)
    return a.reshape(-1, 4)


def _overlap_terms(a, b):
    ix1 = np.maximum(a[:, 0], b[:, 0])
    iy1 = np.maximum(a[:, 1], b[:, 1])
    ix2 = np.minimum(a[:, 2], b[:, 2])
    iy2 = np.minimum(a[:, 3], b[:, 3])
    iw = np.maximum(ix2 - ix1, 0.0)
    ih = np.maximum(iy2 - iy1, 0.0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    return inter, union, iw, ih


def iou_arrays(a, b):
    """Row-wise IoU of two (k, 4) corner arrays."""
    a, b = _as_rows(a), _as_rows(b)
    inter, union, _, _ = _overlap_terms(a, b)
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def iou_matrix(a, b):
    """Pairwise IoU between (m, 4) and (n, 4) arrays."""
    a, b = _as_rows(a), _as_rows(b)
    m, n = len(a), len(b)
    return iou_arrays(np.repeat(a, n, axis=0), np.tile(b, (m, 1))).reshape(m, n)


def giou_arrays(a, b):
    a, b = _as_rows(a), _as_rows(b)
    inter, union, _, _ = _overlap_terms(a, b)
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    cw = np.maximum(a[:, 2], b[:, 2]) - np.minimum(a[:, 0], b[:, 0])
    ch = np.maximum(a[:, 3], b[:, 3]) - np.minimum(a[:, 1], b[:, 1])
    enclose = cw * ch
    penalty = np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)
    return iou - penalty


def iou(a: Box, b: Box) -> float:
    return float(iou_arrays(a, b)[0])


def giou(a: Box, b: Box) -> float:
    return float(giou_arrays(a, b)[0])


def giou_loss(a: Box, b: Box) -> float:
    return 1.0 - giou(a, b)


def overlap_with_grad(a, b, generalized=True):
    """Row-wise (G)IoU of (k, 4) arrays with gradients w.r.t. both corner sets.

    Ties in the max/min corner selections route the subgradient to ``a``.
    """
    a, b = _as_rows(a), _as_rows(b)
    inter, union, iw, ih = _overlap_terms(a, b)
    valid = union > 0
    u = np.where(valid, union, 1.0)
    value = np.where(valid, inter / u, 0.0)
    d_inter = np.where(valid, (u + inter) / u ** 2, 0.0)
    d_area = np.where(valid, -inter / u ** 2, 0.0)   # same for both areas
    d_enclose = np.zeros_like(value)
    if generalized:
        cx1 = np.minimum(a[:, 0], b[:, 0])
        cy1 = np.minimum(a[:, 1], b[:, 1])
        cx2 = np.maximum(a[:, 2], b[:, 2])
        cy2 = np.maximum(a[:, 3], b[:, 3])
        cw, ch = cx2 - cx1, cy2 - cy1
        enclose = cw * ch
        has_c = enclose > 0
        c = np.where(has_c, enclose, 1.0)
        value = value - np.where(has_c, (enclose - union) / c, 0.0)
        # giou = iou - 1 + union / enclose
        d_inter = d_inter - np.where(has_c, 1.0 / c, 0.0)
        d_area = d_area + np.where(has_c, 1.0 / c, 0.0)
        d_enclose = np.where(has_c, -union / c ** 2, 0.0)

    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    # areas
    for g, box, w in ((ga, a, d_area), (gb, b, d_area)):
        bw, bh = box[:, 2] - box[:, 0], box[:, 3] - box[:, 1]
        g[:, 0] -= w * bh
        g[:, 2] += w * bh
        g[:, 1] -= w * bw
        g[:, 3] += w * bw
    # intersection corners: max of x1/y1, min of x2/y2
    pos_w, pos_h = (iw > 0).astype(float), (ih > 0).astype(float)
    di_x1 = -d_inter * ih * pos_w
    di_x2 = d_inter * ih * pos_w
    di_y1 = -d_inter * iw * pos_h
    di_y2 = d_inter * iw * pos_h
    _route(ga, gb, 0, a[:, 0] >= b[:, 0], di_x1)
    _route(ga, gb, 1, a[:, 1] >= b[:, 1], di_y1)
    _route(ga, gb, 2, a[:, 2] <= b[:, 2], di_x2)
    _route(ga, gb, 3, a[:, 3] <= b[:, 3], di_y2)
    if generalized:
        _route(ga, gb, 0, a[:, 0] <= b[:, 0], -d_enclose * ch)
        _route(ga, gb, 1, a[:, 1] <= b[:, 1], -d_enclose * cw)
        _route(ga, gb, 2, a[:, 2] >= b[:, 2], d_enclose * ch)
        _route(ga, gb, 3, a[:, 3] >= b[:, 3], d_enclose * cw)
    return value, ga, gb


def _route(ga, gb, col, to_a, grad):
    ga[:, col] += np.where(to_a, grad, 0.0)
    gb[:, col] += np.where(to_a, 0.0, grad)


# ---------------------------------------------------------------------------
# suppression
# ---------------------------------------------------------------------------

def quadratic_decay(overlap):
    return (1.0 - overlap) ** 2


def _soft_nms_group(boxes, scores, cfg, decay):
    keep_idx = np.nonzero(scores >= cfg.score_floor)[0]
    boxes = boxes[keep_idx]
    scores = scores[keep_idx].astype(np.float64).copy()
    order = []
    while len(keep_idx):
        best = int(np.argmax(scores))  # first maximum == lowest input index among ties
        order.append((int(keep_idx[best]), float(scores[best])))
        rest = np.ones(len(keep_idx), dtype=bool)
        rest[best] = False
        keep_idx, boxes_rest, scores = keep_idx[rest], boxes[rest], scores[rest]
        if not len(keep_idx):
            break
        overlaps = iou_arrays(boxes_rest, np.broadcast_to(boxes[best], boxes_rest.shape))
        hit = overlaps >= cfg.theta
        if np.any(hit):
            factors = np.array([decay(float(o)) for o in overlaps[hit]])
            scores[hit] = scores[hit] * factors
        alive = scores >= cfg.score_floor
        keep_idx, boxes, scores = keep_idx[alive], boxes_rest[alive], scores[alive]
    return order


def soft_nms(dets: Sequence[Detection], cfg: SoftNmsConfig = SoftNmsConfig(),
             decay: Optional[Callable[[float], float]] = None) -> list:
    """Decay the scores of boxes overlapping the running maximum by ``(1 - IoU)^2``.

    Selection order is (score desc, input index asc).  With ``per_class`` each
    class is processed independently and the results are concatenated in
    ascending class order.
    """
    decay = quadratic_decay if decay is None else decay
    dets = list(dets)
    if not dets:
        return []
    boxes = np.array([d.box.as_array() for d in dets]).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if cfg.per_class:
        groups = [np.array([i for i, d in enumerate(dets) if d.class_id == c])
                  for c in sorted({d.class_id for d in dets})]
    else:
        groups = [np.arange(len(dets))]
    out = []
    for idx in groups:
        for local, score in _soft_nms_group(boxes[idx], scores[idx], cfg, decay):
            src = dets[int(idx[local])]
            out.append(Detection(src.box, src.class_id, min(max(score, 0.0), 1.0)))
    return out


def hard_nms(dets: Sequence[Detection], cfg: SoftNmsConfig = SoftNmsConfig()) -> list:
    """Classical NMS: overlapping boxes are removed outright."""
    if cfg.score_floor == 0.0:
        cfg = SoftNmsConfig(cfg.theta, np.nextafter(0.0, 1.0), cfg.per_class)
    return soft_nms(dets, cfg, decay=lambda _: 0.0)


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass
class LevelTargets:
    stride: int
    objectness: np.ndarray          # (h, w) in {0, 1}
    class_id: np.ndarray            # (h, w), -1 where negative
    class_onehot: np.ndarray        # (h, w, num_classes)
    box: np.ndarray                 # (h, w, 4) pixel corners
    box_norm: np.ndarray            # (h, w, 4) cx, cy, w, h divided by the image size
    area: np.ndarray = field(repr=False, default=None)

    @property
    def num_positive(self):
        return int(self.objectness.sum())

    def positives(self):
        return [tuple(ij) for ij in np.argwhere(self.objectness > 0)]


def pick_level(box: Box, strides=(8, 16, 32)):
    size = math.sqrt(max(box.area, 0.0))
    return int(np.argmin([abs(s - size) for s in strides]))


def assign_targets(image_size, gt, strides=(8, 16, 32), num_classes=2):
    """Center-cell assignment at the stride nearest to ``sqrt(w * h)``.

    ``gt`` is a sequence of ``(Box, class_id)``.  When two boxes land on the
    same cell the larger one wins (earlier index on equal area).
    """
    levels = []
    for s in strides:
        h = w = image_size // s
        levels.append(LevelTargets(
            s, np.zeros((h, w)), np.full((h, w), -1, dtype=np.int64),
            np.zeros((h, w, num_classes)), np.zeros((h, w, 4)), np.zeros((h, w, 4)),
            np.full((h, w), -1.0)))
    tol = 1e-6
    for k, (box, cls) in enumerate(gt):
        if (box.x1 < -tol or box.y1 < -tol or box.x2 > image_size + tol
                or box.y2 > image_size + tol):
            raise ValidationError(f"ground-truth box {k} lies outside the {image_size}px image: {box}")
        if not 0 <= cls < num_classes:
            raise ValidationError(f"ground-truth box {k} has class {cls} outside [0, {num_classes})")
        lvl = levels[pick_level(box, strides)]
        cx, cy = box.center
        hh, ww = lvl.objectness.shape
        i = min(int(cy // lvl.stride), hh - 1)
        j = min(int(cx // lvl.stride), ww - 1)
        if box.area <= lvl.area[i, j]:
            continue
        lvl.area[i, j] = box.area
        lvl.objectness[i, j] = 1.0
        lvl.class_id[i, j] = cls
        lvl.class_onehot[i, j] = 0.0
        lvl.class_onehot[i, j, cls] = 1.0
        lvl.box[i, j] = box.as_array()
        lvl.box_norm[i, j] = np.array([cx, cy, box.width, box.height]) / image_size
    return levels
