"""The ten acceptance criteria; each test prints one PASS/FAIL line."""
import time

import numpy as np
import pytest

from ehdk.accounting import gsconv_comparison, neck_comparison
from ehdk.boxes import Box, Detection, SoftNmsConfig, giou, giou_arrays, iou_matrix, soft_nms
from ehdk.cli import main
from ehdk.data import DatasetSample, SynthConfig, synth_image
from ehdk.metrics import COCO_THRESHOLDS, evaluate_map
from ehdk.model import ModelConfig, build_model
from ehdk.neck import RepConv, repconv_fuse
from ehdk.pipeline import (ABLATION_ROWS, ablation_table_rows, config_for, evaluate_model, fused_copy,
                           max_output_difference, probe_images, run_ablation)
from ehdk.report import RunReport
from ehdk.suite import run_suite
from ehdk.tensor import Tensor
from ehdk.train import TrainConfig, train
from ehdk.wavelet import iwt2, wt2
from test_boxes import brute_soft_nms, random_box
from test_metrics import random_instance, reference_ap, reference_map
from test_neck import randomize_bn


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {number} ({title}) failed: {detail}"
    return report


def overfit_samples():
    cfg = SynthConfig(n_images=16, seed=7, min_objects=1)
    return [DatasetSample(*synth_image(cfg, i), name=f"{i:04d}") for i in range(16)]


OVERFIT_TC = TrainConfig(seed=7, iterations=500, batch_size=8, lr=0.01, augment_flip=False,
                         augment_brightness=False, augment_erase=False)


@pytest.fixture(scope="module")
def overfit_run():
    samples = overfit_samples()
    model = build_model(ModelConfig(), OVERFIT_TC.seed)
    start = time.perf_counter()
    result = train(model, samples, OVERFIT_TC)
    seconds = time.perf_counter() - start
    return model, samples, result.log, seconds


class _Stop(Exception):
    pass


def test_01_gradient_suite(verdict):
    start = time.perf_counter()
    outcomes = run_suite(seed=0)
    seconds = time.perf_counter() - start
    worst = {kind: max(o.error for o in outcomes if o.kind == kind) for kind in ("op", "block", "loss")}
    failed = [o.name for o in outcomes if not o.passed]
    limits = {"op": 1e-6, "block": 1e-4, "loss": 1e-3}
    ok = not failed and all(worst[k] < limits[k] for k in limits) and seconds < 300
    names = {o.name for o in outcomes}
    ok = ok and {"c3k2_wtcoord", "cga", "cspstage", "model_objectness_64", "full_loss_64"} <= names
    verdict(1, "gradient suite", ok,
            f"{len(outcomes)} cases, worst op {worst['op']:.1e}, block {worst['block']:.1e}, "
            f"loss {worst['loss']:.1e}, {seconds:.1f}s, failed {failed}")


def test_02_wavelet(verdict):
    rng = np.random.default_rng(0)
    worst_pr = worst_parseval = 0.0
    odd = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 20, 2))
        odd += (h % 2) or (w % 2)
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), h, w))
        bands = wt2(Tensor(x))
        worst_pr = max(worst_pr, float(np.max(np.abs(iwt2(bands).data - x))))
        mode = "edge" if min(h, w) < 2 else "reflect"
        padded = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), mode=mode)
        worst_parseval = max(worst_parseval, abs(bands.energy() - float((padded ** 2).sum())))
    ok = worst_pr < 1e-10 and worst_parseval < 1e-10 and odd > 0
    verdict(2, "wavelet reconstruction and energy", ok,
            f"reconstruction {worst_pr:.1e}, energy {worst_parseval:.1e}, {odd} odd-size tensors")


def test_03_reparameterization(verdict, overfit_run):
    rng = np.random.default_rng(3)
    worst = 0.0
    for draw in range(100):
        c_in = int(rng.integers(1, 6))
        stride = int(rng.integers(1, 3))
        c_out = c_in if rng.uniform() < 0.5 else int(rng.integers(1, 6))
        rep = RepConv(c_in, c_out, stride)
        rep.reset_parameters(draw)
        randomize_bn(rep, rng)
        rep.eval()
        x = Tensor(rng.standard_normal((2, c_in, 7, 6)))
        worst = max(worst, float(np.max(np.abs(rep(x).data - repconv_fuse(rep)(x).data))))

    model, samples, _, _ = overfit_run
    fused = fused_copy(model)
    out_diff = max_output_difference(model, fused, probe_images(model.cfg, seed=1))
    before, after = evaluate_model(model, samples).result, evaluate_model(fused, samples).result
    keys = ("map50", "map50_95", "precision", "recall", "f1")
    metric_delta = max(abs(getattr(before, k) - getattr(after, k)) for k in keys)
    ok = worst < 1e-10 and metric_delta < 1e-6
    verdict(3, "RepConv reparameterization", ok,
            f"block max diff {worst:.1e} over 100 draws, model output diff {out_diff:.1e}, "
            f"metric delta {metric_delta:.1e} at mAP50 {before.map50:.3f}")


def test_04_soft_nms(verdict):
    a, b = Box(0, 0, 1, 1), Box(0.25, 0, 1.25, 1)       # IoU exactly 0.6
    out = soft_nms([Detection(a, 0, 0.9), Detection(b, 0, 0.8)])
    hand = abs(out[1].score - 0.128) < 1e-12
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 11))
        dets = [Detection(random_box(rng, 20), int(rng.integers(0, 2)), float(rng.uniform(0, 1)))
                for _ in range(n)]
        theta = float(rng.uniform(0.2, 0.8))
        per_class = bool(rng.integers(0, 2))
        got = [(d.box, d.class_id, d.score) for d in soft_nms(dets, SoftNmsConfig(theta, 1e-3, per_class))]
        if got != brute_soft_nms(dets, theta, 1e-3, per_class):
            mismatches += 1
    ok = hand and mismatches == 0
    verdict(4, "soft-NMS", ok, f"hand rescore {out[1].score!r}, {mismatches}/1000 mismatches")


def test_05_giou(verdict):
    rng = np.random.default_rng(5)
    n = 100_000
    p1, q1 = rng.uniform(-50, 50, (n, 2)), rng.uniform(-50, 50, (n, 2))
    a = np.concatenate([p1, p1 + rng.uniform(0.1, 30, (n, 2))], 1)
    b = np.concatenate([q1, q1 + rng.uniform(0.1, 30, (n, 2))], 1)
    g = giou_arrays(a, b)
    i = np.diagonal(iou_matrix(a[:1000], b[:1000]))
    shift = rng.integers(-64, 65, (n, 2)).astype(float) / 8.0     # dyadic shifts keep coordinates exact
    move = np.concatenate([shift, shift], 1)
    bounds = bool(np.all(g > -1.0) and np.all(g <= 1.0))
    below_iou = bool(np.all(g[:1000] <= i + 1e-15))
    translated = float(np.max(np.abs(giou_arrays(a + move, b + move) - g)))
    hand = [giou(Box(0, 0, 1, 1), Box(2, 0, 3, 1)), giou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)),
            giou(Box(1, 1, 4, 5), Box(1, 1, 4, 5))]
    hand_ok = all(abs(h - e) < 1e-12 for h, e in zip(hand, (-1 / 3, -5 / 63, 1.0)))
    ok = bounds and below_iou and translated < 1e-12 and hand_ok
    verdict(5, "GIoU properties", ok,
            f"range ok {bounds}, below IoU {below_iou}, translation {translated:.1e}, hand {hand}")


def test_05_giou_below_iou_everywhere(verdict):
    rng = np.random.default_rng(55)
    worst = -np.inf
    for _ in range(100):
        p, q = rng.uniform(-50, 50, (1000, 2)), rng.uniform(-50, 50, (1000, 2))
        a = np.concatenate([p, p + rng.uniform(0.1, 30, (1000, 2))], 1)
        b = np.concatenate([q, q + rng.uniform(0.1, 30, (1000, 2))], 1)
        worst = max(worst, float(np.max(giou_arrays(a, b) - np.diagonal(iou_matrix(a, b)))))
    verdict(5, "GIoU <= IoU over 1e5 pairs", worst <= 1e-15, f"max GIoU - IoU {worst:.1e}")


def test_06_efficiency(verdict):
    start = time.perf_counter()
    cfg = ModelConfig()
    _, _, neck_ratio = neck_comparison(cfg)
    _, _, gs_ratio = gsconv_comparison(cfg.widths[2], cfg.input_size // 16)
    seconds = time.perf_counter() - start
    ok = gs_ratio <= 0.7 and neck_ratio <= 0.9 and seconds < 1.0
    verdict(6, "efficiency", ok, f"GSConv/conv MACs {gs_ratio:.4f}, slim/plain neck MACs {neck_ratio:.4f}, "
                                 f"{seconds:.2f}s")


@pytest.mark.slow
def test_07_overfit(verdict, overfit_run):
    model, samples, log, seconds = overfit_run
    res = evaluate_model(model, samples).result

    replay = []

    def stop_after(rec):
        replay.append(rec)
        if len(replay) == 50:
            raise _Stop

    with pytest.raises(_Stop):
        train(build_model(ModelConfig(), OVERFIT_TC.seed), overfit_samples(), OVERFIT_TC, stop_after)
    deterministic = replay == log[:50]
    ok = res.map50 >= 0.90 and len(log) <= 500 and seconds < 1800 and deterministic
    verdict(7, "overfit 16 images", ok,
            f"mAP50 {res.map50:.4f} after {len(log)} iterations in {seconds:.0f}s, "
            f"loss {log[0].total:.2f} -> {log[-1].total:.3f}, replay identical {deterministic}")


def _param_names(cfg):
    return {n for n, _ in build_model(cfg).named_parameters()}


@pytest.mark.slow
def test_08_ablation(verdict):
    base = ModelConfig()
    samples = overfit_samples()
    tc = TrainConfig(seed=7, iterations=100, batch_size=2, lr=0.01)
    rows = run_ablation(base, tc, samples, samples, list(ABLATION_ROWS))
    headers, table = ablation_table_rows(rows)
    finite = all(np.isfinite([r.total for r in row.log]).all() and len(row.log) == 100 for row in rows)
    complete = len(table) == 8 and all(len(t) == len(headers) for t in table)

    off = _param_names(config_for(base, ""))
    prefixes = {"A": ("backbone.stage",), "B": ("backbone.psa",), "C": ("neck.",)}
    isolated = all(_param_names(config_for(base, t)) ^ off and
                   all(n.startswith(prefixes[t]) for n in _param_names(config_for(base, t)) ^ off)
                   for t in "ABC")
    isolated = isolated and _param_names(config_for(base, "D")) == off
    ok = finite and complete and isolated
    verdict(8, "ablation grid", ok, f"{len(rows)} rows, finite {finite}, complete {complete}, "
                                    f"namespace isolation {isolated}")


def test_09_map_oracle(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(500):
        preds, gts = random_instance(rng)
        res = evaluate_map(preds, gts)
        if res.map50_95 != reference_map(preds, gts, COCO_THRESHOLDS):
            mismatches += 1
        if res.map50 != reference_map(preds, gts, (0.5,)):
            mismatches += 1

    # a false positive outranks the only true positive: precision 1/2 at recall 1
    gt = {"im": [(Box(0, 0, 10, 10), 0)]}
    pred = {"im": [Detection(Box(0, 0, 10, 3), 0, 0.9), Detection(Box(0, 0, 10, 7), 0, 0.4)]}
    hand = evaluate_map(pred, gt).ap[0][0.5]
    ok = mismatches == 0 and hand == 0.5 and reference_ap(pred, gt, 0, 0.5) == 0.5
    verdict(9, "mAP oracle", ok, f"{mismatches} mismatches over 500 cases, hand AP {hand!r}")


DETERMINISM_CFG = """\
model.input_size = 64
model.widths = 4, 8, 8, 16
model.head_width = 4
model.embed_dim = 4
train.iterations = 20
train.batch_size = 4
train.seed = 7
data.image_size = 64
data.n_images = 24
data.seed = 7
data.lesion_size_range = 8, 24
data.embryo_size_range = 6, 16
"""


def _pipeline(root):
    root.mkdir()
    cfg = root / "run.cfg"
    cfg.write_text(DETERMINISM_CFG)
    codes = [main(["gen", "--config", str(cfg), "--out", str(root / "data")]),
             main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "m.ckpt"),
                   "--quiet"]),
             main(["eval", "--data", str(root / "data"), "--ckpt", str(root / "m.ckpt"), "--split", "train",
                   "--out", str(root / "eval")])]
    labels = {p.name: p.read_bytes() for p in sorted((root / "data" / "labels").glob("*.txt"))}
    report = RunReport.from_json((root / "eval" / "report.json").read_text())
    return codes, labels, (root / "m.ckpt.loss.csv").read_bytes(), report.stable_json().encode(), \
        (root / "m.ckpt").read_bytes()


def test_10_determinism(verdict, tmp_path):
    first = _pipeline(tmp_path / "one")
    second = _pipeline(tmp_path / "two")
    codes_ok = first[0] == second[0] == [0, 0, 0]
    same = [a == b for a, b in zip(first[1:], second[1:])]
    ok = codes_ok and all(same) and len(first[1]) == 24
    verdict(10, "seeded determinism", ok,
            f"labels {same[0]}, loss log {same[1]}, metric JSON {same[2]}, checkpoint {same[3]}")
