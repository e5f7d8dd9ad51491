"""
``ehdk`` command-line interface.

Exit codes: 0 success, 1 contract violation (message on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from .accounting import count_params_flops, gsconv_comparison, neck_comparison
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import CLASS_NAMES, generate_dataset, load_dataset
from .errors import EHDKError
from .model import build_model
from .pipeline import (ablation_grid, ablation_table_rows, evaluate_model, fused_copy, max_output_difference,
                       probe_images, run_ablation)
from .report import (RunReport, format_detections, format_loss_csv, format_table, report_metrics,
                     write_pr_svgs)
from .suite import run_suite
from .train import train

FUSE_TOLERANCE = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _run_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig().validate()


def _split_or_fail(data_dir, split, num_classes):
    samples = load_dataset(data_dir, split=split, num_classes=num_classes)
    if not samples:
        raise EHDKError(f"empty split: no '{split}' images under {data_dir}")
    return samples


def cmd_gen(args):
    cfg = _run_config(args.config).data
    overrides = {}
    if args.n is not None:
        overrides["n_images"] = args.n
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = replace(cfg, **overrides).validate()
    out = generate_dataset(cfg, args.out)
    print(f"wrote {cfg.n_images} images to {out}")
    return 0


def cmd_train(args):
    rc = _run_config(args.config)
    tc = rc.train
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    samples = _split_or_fail(args.data, "train", rc.model.num_classes)
    model = build_model(rc.model, tc.seed)

    def progress(rec):
        if not args.quiet and (rec.iteration % 25 == 0 or rec.iteration == tc.iterations - 1):
            print(f"iter {rec.iteration:5d}  loss {rec.total:.4f}  box {rec.box:.4f}  obj {rec.obj:.4f}  "
                  f"cls {rec.cls:.4f}  proto {rec.proto:.4f}  lr {rec.lr:g}", flush=True)

    result = train(model, samples, tc, progress)
    save_checkpoint(model, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.csv")
    log_path.write_text(format_loss_csv(result.log))
    print(f"checkpoint {args.out}; loss log {log_path}")
    return 0


def cmd_eval(args):
    start = time.perf_counter()
    model = load_checkpoint(args.ckpt)
    samples = _split_or_fail(args.data, args.split, model.cfg.num_classes)
    ev = evaluate_model(model, samples)
    cost = count_params_flops(model)
    out = Path(args.out) if args.out else Path(f"{args.ckpt}.eval_{args.split}")
    out.mkdir(parents=True, exist_ok=True)
    det_text = format_detections(ev.preds, ev.gts, range(model.cfg.num_classes))
    (out / "detections.txt").write_text(det_text)
    write_pr_svgs(det_text, out, CLASS_NAMES)
    report = RunReport(
        config={"model": asdict(model.cfg), "split": args.split, "checkpoint": Path(args.ckpt).name},
        metrics=report_metrics(ev.result), params=cost.params, macs=cost.macs, seed=int(model.seed),
        wall_clock_s=round(time.perf_counter() - start, 3))
    (out / "report.json").write_text(report.to_json())
    m = ev.result
    print(f"mAP50 {m.map50:.4f}  mAP50-95 {m.map50_95:.4f}  P {m.precision:.4f}  R {m.recall:.4f}  "
          f"F1 {m.f1:.4f}  -> {out}")
    return 0


def cmd_ablate(args):
    rc = _run_config(args.config)
    tc = rc.train
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    rows = ablation_grid(args.grid.replace(",", ""), full=args.full)
    train_samples = _split_or_fail(args.data, "train", rc.model.num_classes)
    eval_samples = load_dataset(args.data, split=args.split, num_classes=rc.model.num_classes) or train_samples

    def progress(row):
        print(f"{row.label:10s} mAP50 {row.result.map50:.4f}  final loss {row.final_loss:.4f}", flush=True)

    results = run_ablation(rc.model, tc, train_samples, eval_samples, rows, progress)
    headers, table = ablation_table_rows(results)
    text = format_table(headers, table)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text)
        payload = [{"toggles": r.toggles, "label": r.label, "params": r.params, "macs": r.macs,
                    "final_loss": r.final_loss, "metrics": report_metrics(r.result)} for r in results]
        (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_fuse(args):
    model = load_checkpoint(args.ckpt)
    fused = fused_copy(model)
    diff = max_output_difference(model, fused, probe_images(model.cfg, seed=model.seed))
    if diff >= FUSE_TOLERANCE:
        raise EHDKError(f"fused model deviates from the trained model by {diff:.3e} (limit {FUSE_TOLERANCE})")
    if args.data:
        samples = _split_or_fail(args.data, args.split, model.cfg.num_classes)
        before, after = evaluate_model(model, samples).result, evaluate_model(fused, samples).result
        worst = max(abs(getattr(before, k) - getattr(after, k))
                    for k in ("map50", "map50_95", "precision", "recall", "f1"))
        if worst >= FUSE_TOLERANCE:
            raise EHDKError(f"fusing changed a validation metric by {worst:.3e}")
        print(f"metrics unchanged (max delta {worst:.3e})")
    save_checkpoint(fused, args.out)
    print(f"fused checkpoint {args.out}; max output difference {diff:.3e}")
    return 0


def cmd_gradcheck(args):
    failures = []

    def show(res):
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4s} {res.kind:5s} {res.name:28s} err {res.error:.3e}  tol {res.tol:.0e}", flush=True)
        if not res.passed:
            failures.append(res.name)

    run_suite(seed=args.seed, progress=show)
    if failures:
        print(f"gradient check failed: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args):
    rc = _run_config(args.config)
    cfg = rc.model
    slim, plain, ratio = neck_comparison(cfg)
    c = cfg.widths[2]
    size = cfg.input_size // 16
    gs, std, gs_ratio = gsconv_comparison(c, size)
    full_slim = count_params_flops(build_model(replace(cfg, slim_neck=True)))
    full_plain = count_params_flops(build_model(replace(cfg, slim_neck=False)))
    payload = {
        "neck": {"slim": {"params": slim.params, "macs": slim.macs},
                 "plain": {"params": plain.params, "macs": plain.macs}, "mac_ratio": ratio},
        "gsconv": {"channels": c, "spatial": size, "gsconv_macs": gs.macs, "standard_macs": std.macs,
                   "gsconv_params": gs.params, "standard_params": std.params, "mac_ratio": gs_ratio},
        "model": {"slim_neck": {"params": full_slim.params, "macs": full_slim.macs},
                  "plain_neck": {"params": full_plain.params, "macs": full_plain.macs}},
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def build_parser():
    p = _Parser(prog="ehdk", description="Toy wavelet/attention detector toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on the train split")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--iterations", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the toggle grid")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--grid", default="A,B,C,D")
    a.add_argument("--full", action="store_true")
    a.add_argument("--iterations", type=int)
    a.add_argument("--split", choices=("train", "val", "test"), default="val")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("fuse", help="deploy every RepConv of a checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--data")
    f.add_argument("--split", choices=("train", "val", "test"), default="val")
    f.set_defaults(func=cmd_fuse)

    c = sub.add_parser("gradcheck", help="run the finite-difference suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="parameter and MAC comparison")
    b.add_argument("--config")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (EHDKError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
