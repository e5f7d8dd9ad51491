"""End-to-end helpers shared by the CLI and the tests: evaluate, ablate, fuse-and-verify."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .accounting import count_params_flops
from .errors import StateError, ValidationError
from .metrics import COCO_THRESHOLDS, MapResult, evaluate_map
from .model import Detector, ModelConfig, build_model, forward_detect, predict
from .neck import RepConv, fuse_all
from .tensor import no_grad
from .train import TrainConfig, train

# Ablation rows in table order; each entry is the set of enabled toggles.
ABLATION_ROWS = ("", "A", "B", "C", "D", "AB", "ABC", "ABCD")
TOGGLES = "ABCD"


def sample_images(samples):
    return np.stack([s.image.astype(np.float64) / 255.0 for s in samples])[:, None]


@dataclass
class Evaluation:
    result: MapResult
    preds: dict
    gts: dict


def evaluate_model(model: Detector, samples, batch_size=8) -> Evaluation:
    """Detections and mAP for ``samples``, keyed by sample name."""
    if not samples:
        raise ValidationError("empty split")
    dets = predict(model, sample_images(samples), batch_size=batch_size)
    names = [s.name or f"{i:04d}" for i, s in enumerate(samples)]
    preds = dict(zip(names, dets))
    gts = {n: s.boxes() for n, s in zip(names, samples)}
    result = evaluate_map(preds, gts, COCO_THRESHOLDS, num_classes=model.cfg.num_classes)
    return Evaluation(result, preds, gts)


def row_label(toggles):
    return "+".join(toggles) if toggles else "baseline"


def ablation_grid(letters=TOGGLES, full=False):
    """Toggle sets to run: the fixed table rows restricted to ``letters``, or every subset."""
    letters = "".join(sorted(set(letters)))
    bad = set(letters) - set(TOGGLES)
    if bad:
        raise ValidationError(f"unknown toggles {sorted(bad)}; choose from {TOGGLES}")
    if full:
        rows = []
        for mask in range(1 << len(letters)):
            rows.append("".join(c for i, c in enumerate(letters) if mask >> i & 1))
        return sorted(rows, key=lambda r: (len(r), r))
    seen, rows = set(), []
    for r in ABLATION_ROWS:
        kept = "".join(c for c in r if c in letters)
        if kept not in seen:
            seen.add(kept)
            rows.append(kept)
    return rows


def config_for(base: ModelConfig, toggles: str) -> ModelConfig:
    return base.with_toggles(*(c in toggles for c in TOGGLES))


@dataclass
class AblationRow:
    toggles: str
    params: int
    macs: int
    result: MapResult
    final_loss: float
    seconds: float = 0.0
    log: list = field(default_factory=list, repr=False)

    @property
    def label(self):
        return row_label(self.toggles)


def run_ablation(base: ModelConfig, tc: TrainConfig, train_samples, eval_samples, rows, progress=None):
    """Train and evaluate one model per toggle set, all from the same seed."""
    out = []
    for toggles in rows:
        start = time.perf_counter()
        model = build_model(config_for(base, toggles), tc.seed)
        cost = count_params_flops(model)
        res = train(model, train_samples, tc)
        ev = evaluate_model(model, eval_samples)
        row = AblationRow(toggles, cost.params, cost.macs, ev.result, res.log[-1].total,
                          time.perf_counter() - start, res.log)
        out.append(row)
        if progress is not None:
            progress(row)
    return out


def ablation_table_rows(rows):
    table = []
    for r in rows:
        m = r.result
        marks = ["x" if c in r.toggles else "" for c in TOGGLES]
        table.append([r.label, *marks, f"{r.params}", f"{r.macs / 1e6:.1f}",
                      f"{100 * m.map50:.1f}", f"{100 * m.map50_95:.1f}", f"{100 * m.precision:.1f}",
                      f"{100 * m.recall:.1f}", f"{100 * m.f1:.1f}"])
    headers = ["model", *TOGGLES, "params", "MMACs", "mAP50", "mAP50-95", "P", "R", "F1"]
    return headers, table


def fused_copy(model: Detector) -> Detector:
    reps = [m for _, m in model.named_modules() if isinstance(m, RepConv)]
    if reps and all(m.deployed for m in reps):
        raise StateError("checkpoint is already deployed")
    clone = copy.deepcopy(model)
    fuse_all(clone)
    clone.assign_names()
    clone.eval()
    return clone


def max_output_difference(a: Detector, b: Detector, images) -> float:
    """Largest absolute difference between any raw head output of two models (eval mode)."""
    a.eval()
    b.eval()
    with no_grad():
        oa, ob = forward_detect(a, images), forward_detect(b, images)
    worst = 0.0
    for x, y in zip(oa, ob):
        for field_name in ("box", "obj", "cls", "emb"):
            worst = max(worst, float(np.max(np.abs(getattr(x, field_name).data - getattr(y, field_name).data))))
    return worst


def probe_images(cfg: ModelConfig, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n, cfg.in_channels, cfg.input_size, cfg.input_size))
