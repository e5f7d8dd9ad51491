"""
Composite detection loss and the prototype auxiliary term.

    total = w_box * mean box loss over positive cells
          + w_obj * objectness BCE summed over all cells / max(1, positives)
          + w_cls * class BCE summed over positive cells / max(1, positives)
          + w_proto * prototype cross-entropy over positive cells

The box loss is ``1 - GIoU`` (or ``1 - IoU`` with the GIoU switch off).
Prototypes are class-mean embeddings blended into a running bank before the
loss is taken; the bank itself is treated as a constant by the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import overlap_with_grad
from .model import decode_op
from .tensor import Tensor, make_result


@dataclass
class LossWeights:
    box: float = 5.0
    obj: float = 1.0
    cls: float = 1.0
    proto: float = 0.1


class PrototypeBank:
    """Per-class running mean embeddings with support counts."""

    def __init__(self, num_classes, dim, momentum=0.9):
        self.num_classes = num_classes
        self.dim = dim
        self.momentum = momentum
        self.prototypes = np.zeros((num_classes, dim))
        self.counts = np.zeros(num_classes, dtype=np.int64)

    @property
    def present(self):
        return self.counts > 0

    def update(self, embeddings, labels):
        embeddings = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.dim)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        for k in np.unique(labels):
            mean = embeddings[labels == k].mean(axis=0)
            if self.counts[k]:
                self.prototypes[k] = self.momentum * self.prototypes[k] + (1 - self.momentum) * mean
            else:
                self.prototypes[k] = mean
            self.counts[k] += int((labels == k).sum())

    def classify(self, embeddings):
        """Nearest-prototype labels among the classes that have a prototype."""
        embeddings = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.dim)
        ids = np.nonzero(self.present)[0]
        d = ((embeddings[:, None, :] - self.prototypes[ids][None]) ** 2).sum(-1)
        return ids[np.argmin(d, axis=1)]

    def copy(self):
        other = PrototypeBank(self.num_classes, self.dim, self.momentum)
        other.prototypes = self.prototypes.copy()
        other.counts = self.counts.copy()
        return other


def prototype_cross_entropy(emb: Tensor, labels, prototypes, present=None):
    """Mean of ``-log softmax(-||e - p_k||^2)[label]``; returns (loss, excluded count)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    protos = np.asarray(prototypes, dtype=np.float64)
    present = np.ones(len(protos), dtype=bool) if present is None else np.asarray(present)
    ids = np.nonzero(present)[0]
    included = np.isin(labels, ids)
    excluded = int((~included).sum())
    e = emb.data
    if not included.any():
        return make_result(np.array(0.0), (emb,), lambda g: (np.zeros_like(e),), "prototype_ce"), excluded
    col = np.searchsorted(ids, labels[included])
    diff = e[included][:, None, :] - protos[ids][None]          # (m, k, d)
    logits = -(diff ** 2).sum(-1)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    m = int(included.sum())
    loss = -logp[np.arange(m), col].mean()
    soft = np.exp(logp)
    onehot = np.zeros_like(soft)
    onehot[np.arange(m), col] = 1.0

    def backward(g):
        dlogits = (soft - onehot) / m                              # (m, k)
        de = np.zeros_like(e)
        de[included] = (dlogits[:, :, None] * (-2.0 * diff)).sum(axis=1)
        return (g * de,)

    return make_result(np.array(loss), (emb,), backward, "prototype_ce"), excluded


def prototype_loss(embeddings: Tensor, labels, bank: PrototypeBank):
    """Update ``bank`` with this batch, then score the embeddings against it."""
    bank.update(embeddings.data, labels)
    loss, _ = prototype_cross_entropy(embeddings, labels, bank.prototypes, bank.present)
    return loss


def bce_with_logits(logits: Tensor, targets, scale=1.0):
    """``scale * sum`` of the element-wise binary cross-entropy."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64).reshape(x.shape)
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() * scale
    sig = T._sigmoid(x)
    return make_result(np.array(loss), (logits,), lambda g: (g * (sig - t) * scale,), "bce")


def overlap_loss(pred: Tensor, target, generalized=True):
    """Mean of ``1 - GIoU`` (or ``1 - IoU``) between predicted and target corners."""
    value, ga, _ = overlap_with_grad(pred.data, target, generalized)
    k = len(value)
    loss = float(np.mean(1.0 - value))
    return make_result(np.array(loss), (pred,), lambda g: (-g * ga / k,), "giou_loss" if generalized else "iou_loss")


def _flat_cells(t: Tensor):
    n, c, h, w = t.shape
    return T.reshape(T.transpose(t, (0, 2, 3, 1)), (n * h * w, c))


@dataclass
class LossResult:
    total: Tensor
    components: dict = field(default_factory=dict)
    num_positive: int = 0


def detection_loss(outputs, targets, bank: PrototypeBank, weights: LossWeights = LossWeights(),
                   generalized=True) -> LossResult:
    """``outputs`` from forward_detect; ``targets[b][level]`` from assign_targets."""
    obj_terms, pos_box, pos_cls, pos_emb = [], [], [], []
    box_targets, cls_targets, labels, cells, strides = [], [], [], [], []
    for lvl, out in enumerate(outputs):
        n, _, h, w = out.obj.shape
        obj_t = np.stack([targets[b][lvl].objectness for b in range(n)])      # (n, h, w)
        obj_terms.append((T.reshape(out.obj, (n * h * w,)), obj_t.reshape(-1)))
        pos = np.argwhere(obj_t > 0)
        if not len(pos):
            continue
        flat = pos[:, 0] * h * w + pos[:, 1] * w + pos[:, 2]
        pos_box.append(T.getitem(_flat_cells(out.box), flat))
        pos_cls.append(T.getitem(_flat_cells(out.cls), flat))
        pos_emb.append(T.getitem(_flat_cells(out.emb), flat))
        box_targets.append(np.stack([targets[b][lvl].box[i, j] for b, i, j in pos]))
        cls_targets.append(np.stack([targets[b][lvl].class_onehot[i, j] for b, i, j in pos]))
        labels.append(np.array([targets[b][lvl].class_id[i, j] for b, i, j in pos]))
        cells.append(pos[:, 1:])
        strides.append(np.full(len(pos), out.stride, dtype=np.float64))

    num_pos = int(sum(len(l) for l in labels))
    norm = 1.0 / max(num_pos, 1)
    obj_logits = T.concat([o for o, _ in obj_terms], axis=0)
    obj_loss = bce_with_logits(obj_logits, np.concatenate([t for _, t in obj_terms]), norm)
    terms = {"obj": obj_loss}
    if num_pos:
        raw = T.concat(pos_box, axis=0)
        corners = decode_op(raw, np.concatenate(cells), np.concatenate(strides))
        terms["box"] = overlap_loss(corners, np.concatenate(box_targets), generalized)
        terms["cls"] = bce_with_logits(T.concat(pos_cls, axis=0), np.concatenate(cls_targets), norm)
        terms["proto"] = prototype_loss(T.concat(pos_emb, axis=0), np.concatenate(labels), bank)
    zero = Tensor(np.array(0.0))
    parts = [
        T.scale(terms.get("box", zero), weights.box),
        T.scale(obj_loss, weights.obj),
        T.scale(terms.get("cls", zero), weights.cls),
        T.scale(terms.get("proto", zero), weights.proto),
    ]
    total = T.add_n(parts)
    components = {k: float(terms[k].data) if k in terms else 0.0 for k in ("box", "obj", "cls", "proto")}
    components["total"] = float(total.data)
    return LossResult(total, components, num_pos)
