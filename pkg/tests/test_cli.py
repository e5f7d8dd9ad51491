"""End-to-end command-line runs on a tiny configuration."""
import json

import pytest

from ehdk.checkpoint import load_checkpoint, save_checkpoint
from ehdk.cli import main
from ehdk.model import build_model
from ehdk.suite import tiny_model_config

TINY_CFG = """\
model.input_size = 64
model.widths = 4, 8, 8, 16
model.head_width = 4
model.embed_dim = 4
train.iterations = 3
train.batch_size = 2
train.seed = 7
data.image_size = 64
data.n_images = 20
data.seed = 7
data.lesion_size_range = 8, 24
data.embryo_size_range = 6, 16
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "m.ckpt"),
                 "--quiet"]) == 0
    return root


class TestPipeline:
    def test_gen_outputs(self, workspace):
        data = workspace / "data"
        assert len(list((data / "images").glob("*.pgm"))) == 20
        assert len(list((data / "labels").glob("*.txt"))) == 20
        assert (data / "manifest.txt").exists()

    def test_train_outputs(self, workspace):
        lines = (workspace / "m.ckpt.loss.csv").read_text().splitlines()
        assert lines[0] == "iteration,total,box,obj,cls,proto,lr" and len(lines) == 4
        assert load_checkpoint(workspace / "m.ckpt").prototypes is not None

    def test_eval_outputs(self, workspace, capsys):
        out = workspace / "ev"
        assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(workspace / "m.ckpt"),
                     "--split", "val", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["seed"] == 7 and 0 <= report["metrics"]["map50"] <= 1
        assert report["config"]["split"] == "val"
        assert (out / "detections.txt").read_text().startswith("# num_gt 0 ")
        assert sorted(p.name for p in out.glob("*.svg")) == ["pr_class0.svg", "pr_class1.svg"]
        assert "mAP50" in capsys.readouterr().out

    def test_fuse_keeps_metrics(self, workspace, capsys):
        fused = workspace / "fused.ckpt"
        assert main(["fuse", "--ckpt", str(workspace / "m.ckpt"), "--out", str(fused),
                     "--data", str(workspace / "data"), "--split", "val"]) == 0
        out = capsys.readouterr().out
        delta = float(out.split("max delta ")[1].split(")")[0])
        assert delta < 1e-6
        assert load_checkpoint(fused).cfg == load_checkpoint(workspace / "m.ckpt").cfg
        assert main(["fuse", "--ckpt", str(fused), "--out", str(workspace / "again.ckpt")]) == 1
        assert "already deployed" in capsys.readouterr().err

    def test_ablate_table(self, workspace, capsys):
        out = workspace / "abl"
        assert main(["ablate", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "data"),
                     "--iterations", "2", "--grid", "A,D", "--out", str(out)]) == 0
        rows = json.loads((out / "ablation.json").read_text())
        assert [r["label"] for r in rows] == ["baseline", "A", "D", "A+D"]
        assert (out / "ablation.txt").read_text().splitlines()[0].split()[0] == "model"


class TestErrors:
    def test_empty_split_exit_1(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY_CFG.replace("data.n_images = 20", "data.n_images = 5"))
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        ckpt = save_checkpoint(build_model(tiny_model_config(), 0), tmp_path / "m.ckpt")
        assert main(["eval", "--data", str(tmp_path / "d"), "--ckpt", str(ckpt), "--split", "val"]) == 1
        assert "empty split" in capsys.readouterr().err

    def test_unknown_subcommand_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_argument_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", "x"])
        assert exc.value.code == 2

    def test_bad_config_exit_1(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("model.nonsense = 1\n")
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
        assert "model.nonsense" in capsys.readouterr().err

    def test_corrupt_checkpoint_exit_1(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["fuse", "--ckpt", str(bad), "--out", str(tmp_path / "o.ckpt")]) == 1


class TestBench:
    def test_ratios(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        assert main(["bench", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["gsconv"]["mac_ratio"] <= 0.7
        assert payload["neck"]["mac_ratio"] <= 0.9
        assert payload["model"]["slim_neck"]["macs"] < payload["model"]["plain_neck"]["macs"]
