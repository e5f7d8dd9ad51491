"""
Training loop: seeded mini-batches, composite loss, SGD with momentum.

The learning rate is fixed and drops by 10x once ``lr_decay_at`` of the
iterations have run.  Everything is single-threaded and draws from one
``default_rng(seed)`` stream, so the loss log is bit-identical across runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import assign_targets
from .data import AugmentSwitches, DatasetSample, augment
from .errors import ConfigError, DivergenceError, ValidationError
from .loss import LossWeights, PrototypeBank, detection_loss
from .model import STRIDES, Detector, forward_detect


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 100
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 10.0             # global L2 norm; 0 disables
    lr_decay_at: float = 0.8
    w_box: float = 5.0
    w_obj: float = 1.0
    w_cls: float = 1.0
    w_proto: float = 0.1
    augment_flip: bool = True
    augment_brightness: bool = True
    augment_erase: bool = True

    def validate(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr", "weight_decay", "grad_clip", "w_box", "w_obj", "w_cls", "w_proto"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.lr_decay_at <= 1:
            raise ConfigError(f"lr_decay_at must lie in (0, 1], got {self.lr_decay_at}")
        return self

    @property
    def weights(self):
        return LossWeights(self.w_box, self.w_obj, self.w_cls, self.w_proto)

    @property
    def switches(self):
        return AugmentSwitches(self.augment_flip, self.augment_brightness, self.augment_erase)

    def lr_at(self, iteration):
        """Learning rate for a 0-based iteration index."""
        return self.lr * (0.1 if iteration >= math.floor(self.lr_decay_at * self.iterations) else 1.0)


@dataclass
class LogRecord:
    iteration: int
    total: float
    box: float
    obj: float
    cls: float
    proto: float
    lr: float


@dataclass
class TrainResult:
    model: Detector
    log: list = field(default_factory=list)
    bank: PrototypeBank = None


class SGD:
    """Heavy-ball momentum; L2 weight decay is folded into the gradient."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            if lr:
                p.data -= lr * v


def clip_grad_norm(params, max_norm):
    """Scale every gradient so the global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def batch_arrays(samples, input_size, num_classes):
    """Stack images into (n, 1, s, s) floats in [0, 1] and build per-level targets."""
    images = []
    targets = []
    for smp in samples:
        if smp.image.shape != (input_size, input_size):
            raise ValidationError(f"sample {smp.name or '?'} is {smp.image.shape}, model expects {input_size}")
        images.append(smp.image.astype(np.float64) / 255.0)
        targets.append(assign_targets(input_size, smp.boxes(), STRIDES, num_classes))
    return np.stack(images)[:, None], targets


def batch_schedule(n, batch_size, iterations, rng):
    """Index batches from consecutive seeded permutations of the training set."""
    batch_size = min(batch_size, n)
    order = np.empty(0, dtype=np.int64)
    for _ in range(iterations):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


def train(model: Detector, dataset, tc: TrainConfig, callback=None) -> TrainResult:
    """Train in place. ``dataset`` is a list of :class:`DatasetSample` (the training split)."""
    tc.validate()
    samples = [s for s in dataset if isinstance(s, DatasetSample)]
    if not samples:
        raise ValidationError("training split is empty")
    cfg = model.cfg
    rng = np.random.default_rng(tc.seed)
    bank = PrototypeBank(cfg.num_classes, cfg.embed_dim)
    params = model.parameters()
    opt = SGD(params, tc.momentum, tc.weight_decay)
    switches = tc.switches
    result = TrainResult(model, [], bank)
    model.train()
    for it, idx in enumerate(batch_schedule(len(samples), tc.batch_size, tc.iterations, rng)):
        batch = [augment(samples[i], switches, rng) for i in idx]
        images, targets = batch_arrays(batch, cfg.input_size, cfg.num_classes)
        model.zero_grad()
        outs = forward_detect(model, images)
        res = detection_loss(outs, targets, bank, tc.weights, generalized=cfg.giou_softnms)
        total = res.components["total"]
        if not math.isfinite(total):
            raise DivergenceError(it)
        res.total.backward()
        clip_grad_norm(params, tc.grad_clip)
        lr = tc.lr_at(it)
        opt.step(lr)
        c = res.components
        rec = LogRecord(it, total, *(c[k] + 0.0 for k in ("box", "obj", "cls", "proto")), lr)
        result.log.append(rec)
        if callback is not None:
            callback(rec)
    model.prototypes = bank
    model.eval()
    return result
