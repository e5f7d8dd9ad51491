"""Detector assembly, toggles, decoding and post-processing."""
import numpy as np
import pytest

from ehdk.attention import C2PSACGA, C2PSAPlain
from ehdk.boxes import Box, iou
from ehdk.errors import ConfigError, ShapeError
from ehdk.model import (ModelConfig, build_model, decode_cells, decode_level, forward_detect, postprocess,
                        predict)
from ehdk.neck import GSConv, RepConv
from ehdk.suite import tiny_model_config
from ehdk.wavelet import WTCoordBottleneck


def names(model):
    return {n for n, _ in model.named_parameters()}


def modules_of(model, kind):
    return [m for _, m in model.named_modules() if isinstance(m, kind)]


@pytest.fixture(scope="module")
def tiny():
    return build_model(tiny_model_config(), 0)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.toggles() == {"A": True, "B": True, "C": True, "D": True}
        assert cfg.input_size == 256

    @pytest.mark.parametrize("kw", [dict(input_size=100), dict(widths=(16, 32, 64)), dict(widths=(16, 32, 63, 128)),
                                    dict(cga_groups=3), dict(num_classes=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_with_toggles_copies(self):
        cfg = ModelConfig(head_width=8)
        off = cfg.with_toggles(False, False, False, False)
        assert off.head_width == 8 and not any(off.toggles().values())
        assert cfg.wtcoord


class TestToggles:
    def test_all_off_has_no_novel_modules(self):
        m = build_model(tiny_model_config().with_toggles(False, False, False, False))
        for kind in (WTCoordBottleneck, C2PSACGA, GSConv, RepConv):
            assert not modules_of(m, kind)
        assert modules_of(m, C2PSAPlain)

    def test_all_on_has_every_module(self, tiny):
        for kind in (WTCoordBottleneck, C2PSACGA, GSConv, RepConv):
            assert modules_of(tiny, kind)

    def test_each_toggle_touches_only_its_namespace(self):
        base = tiny_model_config().with_toggles(False, False, False, False)
        ref = names(build_model(base))
        prefixes = {"A": ("backbone.stage",), "B": ("backbone.psa",), "C": ("neck.",)}
        for i, letter in enumerate("ABC"):
            flags = [j == i for j in range(4)]
            diff = names(build_model(base.with_toggles(*flags))) ^ ref
            assert diff, letter
            assert all(n.startswith(prefixes[letter]) for n in diff), letter

    def test_loss_toggle_has_no_parameters(self):
        base = tiny_model_config()
        assert names(build_model(base)) == names(build_model(base.with_toggles(True, True, True, False)))


class TestForward:
    def test_three_scales(self):
        m = build_model(ModelConfig(), 0)
        outs = forward_detect(m, np.zeros((1, 1, 256, 256)))
        assert [o.stride for o in outs] == [8, 16, 32]
        assert [o.box.shape[2:] for o in outs] == [(32, 32), (16, 16), (8, 8)]
        assert outs[0].cls.shape[1] == 2 and outs[0].emb.shape[1] == 16

    def test_wrong_input_shape(self, tiny):
        with pytest.raises(ShapeError):
            forward_detect(tiny, np.zeros((1, 1, 32, 32)))

    def test_accepts_three_dimensional_stack(self, tiny):
        outs = forward_detect(tiny, np.zeros((2, 64, 64)))
        assert outs[0].box.shape[0] == 2

    def test_same_seed_same_model(self):
        a, b = build_model(tiny_model_config(), 3), build_model(tiny_model_config(), 3)
        c = build_model(tiny_model_config(), 4)
        for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)
        assert any(not np.array_equal(pa.data, pc.data)
                   for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))

    def test_forward_is_deterministic(self, tiny):
        x = np.random.default_rng(0).uniform(0, 1, (1, 1, 64, 64))
        tiny.eval()
        first = forward_detect(tiny, x)
        second = forward_detect(tiny, x)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.obj.data, b.obj.data)


class TestDecode:
    def test_zero_raw_gives_cell_centered_boxes(self):
        cells = np.array([[0, 0], [3, 4]])
        corners, _, _ = decode_cells(np.zeros((2, 4)), cells, 8)
        np.testing.assert_array_equal(corners[0], [0, 0, 8, 8])
        np.testing.assert_array_equal(corners[1], [32, 24, 40, 32])

    def test_size_clip(self):
        corners, _, ds = decode_cells(np.array([[0, 0, 50, -50]]), np.array([[0, 0]]), 8)
        w, h = corners[0, 2] - corners[0, 0], corners[0, 3] - corners[0, 1]
        assert w == pytest.approx(np.exp(8) * 8) and h == pytest.approx(np.exp(-8) * 8)
        assert not ds.any()

    def test_zero_head_every_level(self, tiny):
        m = build_model(tiny_model_config(), 0)
        for head in m.head:
            head.box_pred.weight.data[:] = 0.0
            head.box_pred.bias.data[:] = 0.0
        outs = forward_detect(m, np.zeros((1, 1, 64, 64)))
        for o in outs:
            corners, obj, cls = decode_level(o)
            h = o.box.shape[2]
            ii, jj = np.divmod(np.arange(h * h), h)
            s = o.stride
            expected = np.stack([jj * s, ii * s, (jj + 1) * s, (ii + 1) * s], 1)
            np.testing.assert_allclose(corners[0], expected, atol=1e-12)
            assert np.all((obj > 0) & (obj < 1))


class TestPostprocess:
    def test_valid_detections(self, tiny):
        rng = np.random.default_rng(1)
        dets = predict(tiny, rng.uniform(0, 1, (2, 1, 64, 64)))
        assert len(dets) == 2
        for per_image in dets:
            assert len(per_image) <= 100
            for d in per_image:
                assert isinstance(d.box, Box)
                assert 0 <= d.box.x1 <= d.box.x2 <= 64 and 0 <= d.box.y1 <= d.box.y2 <= 64
                assert 0.0 <= d.score <= 1.0

    def test_confidence_threshold(self, tiny):
        dets = predict(tiny, np.zeros((1, 1, 64, 64)), conf=0.999)
        assert dets == [[]]

    def test_predict_restores_mode(self, tiny):
        tiny.train()
        predict(tiny, np.zeros((1, 1, 64, 64)))
        assert tiny.training
        tiny.eval()

    def test_hard_nms_branch(self):
        m = build_model(tiny_model_config().with_toggles(True, True, True, False), 0)
        outs = forward_detect(m.eval(), np.random.default_rng(2).uniform(0, 1, (1, 1, 64, 64)))
        dets = postprocess(outs, m.cfg, conf=0.0)[0]
        for i, a in enumerate(dets):
            for b in dets[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) < 0.5
