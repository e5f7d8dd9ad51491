"""Metric JSON, detections text, loss CSV and PR-curve SVG."""
import json

import numpy as np
import pytest

from ehdk.boxes import Box, Detection
from ehdk.errors import ParseError, ValidationError
from ehdk.metrics import evaluate_map
from ehdk.report import (RunReport, curves_from_detections, format_detections, format_loss_csv, format_table,
                         parse_detections, pr_curve_svg, report_metrics, write_pr_svgs)
from ehdk.train import LogRecord

PREDS = {
    "0000": [Detection(Box(0, 0, 10, 10), 0, 0.9), Detection(Box(50, 50, 60, 60), 0, 0.6),
             Detection(Box(20, 20, 30, 30), 1, 0.7)],
    "0001": [Detection(Box(5, 5, 15, 15), 0, 0.8)],
}
GTS = {"0000": [(Box(0, 0, 10, 10), 0), (Box(20, 20, 30, 30), 1)], "0001": [(Box(100, 100, 110, 110), 0)]}


def result():
    return evaluate_map(PREDS, GTS, num_classes=2)


def make_report(**kw):
    return RunReport(config={"split": "val"}, metrics=report_metrics(result()), params=10, macs=20, seed=7, **kw)


class TestRunReport:
    def test_json_round_trip(self):
        rep = make_report(wall_clock_s=1.5)
        back = RunReport.from_json(rep.to_json())
        assert back == rep

    def test_stable_json_drops_wall_clock(self):
        a, b = make_report(wall_clock_s=1.0), make_report(wall_clock_s=2.0)
        assert a.to_json() != b.to_json()
        assert a.stable_json() == b.stable_json()
        assert "wall_clock_s" not in json.loads(a.stable_json())

    def test_metric_range_enforced(self):
        with pytest.raises(ValidationError):
            RunReport(config={}, metrics={"map50": 1.2, "map50_95": 0, "precision": 0, "recall": 0, "f1": 0},
                      params=0, macs=0, seed=0)
        with pytest.raises(ValidationError):
            RunReport(config={}, metrics={"map50": 0.5}, params=0, macs=0, seed=0)

    def test_report_metrics_fields(self):
        d = report_metrics(result())
        assert set(d) >= {"map50", "map50_95", "precision", "recall", "f1", "ap50_per_class", "best_score"}
        assert d["ap50_per_class"]["1"] == 1.0


class TestDetectionsFile:
    def test_format(self):
        text = format_detections(PREDS, GTS, [0, 1])
        lines = text.splitlines()
        assert lines[:2] == ["# num_gt 0 2", "# num_gt 1 1"]
        assert "0000 0 0.900000 0.000000 0.000000 10.000000 10.000000 1" in lines
        assert "0000 0 0.600000 50.000000 50.000000 60.000000 60.000000 0" in lines
        assert len(lines) == 6

    def test_parse_round_trip(self):
        rows, num_gt = parse_detections(format_detections(PREDS, GTS, [0, 1]))
        assert num_gt == {0: 2, 1: 1}
        assert len(rows) == 4 and sum(r[7] for r in rows) == 2

    def test_parse_error_line(self):
        with pytest.raises(ParseError) as err:
            parse_detections("# num_gt 0 1\n0000 0 0.5 1 2 3\n")
        assert err.value.line_no == 2

    def test_curves_match_evaluator(self):
        res = result()
        curves = curves_from_detections(format_detections(PREDS, GTS, [0, 1]))
        for c, (recall, precision) in curves.items():
            ref_r, ref_p = res.curves[c].recall, res.curves[c].precision
            np.testing.assert_allclose(recall, ref_r, atol=1e-12)
            np.testing.assert_allclose(precision, ref_p, atol=1e-12)


class TestSvg:
    def test_regenerated_from_detections_alone(self, tmp_path):
        text = format_detections(PREDS, GTS, [0, 1])
        first = write_pr_svgs(text, tmp_path, ["lesion", "embryo"])
        contents = [p.read_text() for p in first]
        (tmp_path / "detections.txt").write_text(text)
        again = write_pr_svgs((tmp_path / "detections.txt").read_text(), tmp_path / ".", ["lesion", "embryo"])
        assert [p.name for p in again] == ["pr_class0.svg", "pr_class1.svg"]
        assert [p.read_text() for p in again] == contents
        assert "lesion" in contents[0]

    def test_polyline_geometry(self):
        svg = pr_curve_svg([1.0], [1.0], "t", size=100, margin=10)
        assert 'points="10.000,10.000 90.000,10.000"' in svg
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


class TestText:
    def test_loss_csv(self):
        log = [LogRecord(0, 1.5, 0.1, 0.2, 0.3, 0.4, 0.01)]
        assert format_loss_csv(log) == "iteration,total,box,obj,cls,proto,lr\n0,1.5,0.1,0.2,0.3,0.4,0.01\n"

    def test_table(self):
        text = format_table(["a", "bb"], [[1, 22], [333, 4]])
        assert text.splitlines() == ["  a  bb", "---  --", "  1  22", "333   4"]
