"""
Run reports and on-disk artifacts: metric JSON, detections text, loss CSV and
per-class PR-curve SVG.

Detections file::

    # num_gt <class_id> <count>          one line per evaluated class
    <image_id> <class_id> <score> <x1> <y1> <x2> <y2> <tp>

Numbers use six decimals; ``tp`` is 1 when the detection matched a ground
truth at IoU 0.5.  Together with the ``num_gt`` lines this is everything a PR
curve needs, so the SVG can be rebuilt from the detections file alone.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .metrics import MapResult, _pr, match_class

METRIC_KEYS = ("map50", "map50_95", "precision", "recall", "f1")
WALL_CLOCK_KEYS = ("wall_clock_s",)


@dataclass
class RunReport:
    config: dict
    metrics: dict
    params: int
    macs: int
    seed: int
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in METRIC_KEYS:
            v = self.metrics.get(k)
            if v is None or not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValidationError(f"metric {k}={v!r} must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "RunReport":
        return cls(**json.loads(text))

    def stable_json(self) -> str:
        """JSON without wall-clock fields, for byte comparisons across runs."""
        d = asdict(self)
        for k in WALL_CLOCK_KEYS:
            d.pop(k, None)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def report_metrics(result: MapResult) -> dict:
    d = {k: float(getattr(result, k)) for k in METRIC_KEYS}
    d["best_score"] = float(result.best_score)
    d["ap50_per_class"] = {str(c): float(per[0.5]) for c, per in sorted(result.ap.items())}
    d["flagged_classes"] = list(result.flagged)
    return d


# ---------------------------------------------------------------------------
# detections file
# ---------------------------------------------------------------------------

def format_detections(preds, gts, classes) -> str:
    """``preds``/``gts`` map image id -> detections / ``(Box, class_id)`` pairs."""
    tp_of = {}
    lines = []
    for c in classes:
        num_gt = sum(1 for items in gts.values() for _, k in items if k == c)
        lines.append(f"# num_gt {c} {num_gt}")
        ranked = sorted(((img, d) for img, ds in preds.items() for d in ds if d.class_id == c),
                        key=lambda t: (-t[1].score, t[0], t[1].box.x1, t[1].box.y1, t[1].box.x2, t[1].box.y2))
        _, tp, _ = match_class(preds, gts, c, 0.5)
        for (img, d), flag in zip(ranked, tp):
            tp_of[id(d)] = int(flag)
    for img in sorted(preds):
        for d in preds[img]:
            b = d.box
            lines.append(f"{img} {d.class_id} {d.score:.6f} {b.x1:.6f} {b.y1:.6f} {b.x2:.6f} {b.y2:.6f} "
                         f"{tp_of.get(id(d), 0)}")
    return "\n".join(lines) + "\n"


def parse_detections(text, source="<detections>"):
    """Returns (rows, num_gt) with rows as (image, class, score, x1, y1, x2, y2, tp)."""
    rows, num_gt = [], {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "#":
                if len(parts) != 4 or parts[1] != "num_gt":
                    raise ValueError("bad header")
                num_gt[int(parts[2])] = int(parts[3])
                continue
            if len(parts) != 8:
                raise ValueError(f"expected 8 fields, got {len(parts)}")
            rows.append((parts[0], int(parts[1]), float(parts[2]), *map(float, parts[3:7]), int(parts[7])))
        except ValueError as exc:
            raise ParseError(source, line_no, str(exc)) from None
    return rows, num_gt


def curves_from_detections(text):
    """class -> (recall, precision) arrays rebuilt from a detections file."""
    rows, num_gt = parse_detections(text)
    curves = {}
    for c in sorted(num_gt):
        mine = sorted((r for r in rows if r[1] == c), key=lambda r: (-r[2], r[0], r[3], r[4], r[5], r[6]))
        tp = np.array([r[7] == 1 for r in mine], dtype=bool)
        curves[c] = _pr(tp, num_gt[c])
    return curves


def pr_curve_svg(recall, precision, title, size=320, margin=40) -> str:
    """Step-free polyline PR plot on a fixed canvas; deterministic text output."""
    inner = size - 2 * margin

    def px(r, p):
        return f"{margin + r * inner:.3f},{margin + (1 - p) * inner:.3f}"

    pts = [px(0.0, 1.0)] + [px(r, p) for r, p in zip(recall, precision)]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
        f'<text x="{size / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" font-size="12">{title}</text>',
        f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="11">recall</text>',
        f'<text x="12" y="{size / 2:.1f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {size / 2:.1f})">precision</text>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{" ".join(pts)}"/>',
        "</svg>",
    ]
    return "\n".join(lines) + "\n"


def write_pr_svgs(detections_text, out_dir, class_names=None):
    out = Path(out_dir)
    paths = []
    for c, (recall, precision) in curves_from_detections(detections_text).items():
        name = class_names[c] if class_names and c < len(class_names) else f"class {c}"
        path = out / f"pr_class{c}.svg"
        path.write_text(pr_curve_svg(recall, precision, f"PR @ IoU 0.5: {name}"))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# loss log
# ---------------------------------------------------------------------------

LOSS_HEADER = "iteration,total,box,obj,cls,proto,lr"


def format_loss_csv(log) -> str:
    lines = [LOSS_HEADER]
    for r in log:
        lines.append(f"{r.iteration},{r.total!r},{r.box!r},{r.obj!r},{r.cls!r},{r.proto!r},{r.lr!r}")
    return "\n".join(lines) + "\n"


def format_table(headers, rows) -> str:
    """Plain fixed-width text table."""
    cells = [list(map(str, headers))] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    out = [fmt(cells[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in cells[1:]]
    return "\n".join(out) + "\n"
