"""RepConv reparameterization, GSConv, CSPStage and the three-level fusion neck."""
import numpy as np
import pytest

from ehdk import tensor as T
from ehdk.accounting import gsconv_comparison, module_cost, neck_comparison
from ehdk.errors import ConfigError, ShapeError, StateError
from ehdk.gradcheck import grad_check
from ehdk.model import ModelConfig
from ehdk.neck import (CSPStage, FusionNeck, GSConv, PyramidFeatures, RepConv, cspstage, fuse_all, gsconv,
                       repconv_forward, repconv_fuse, repgfpn_slim_forward)
from ehdk.nn import Conv, ConvBN, conv2d
from ehdk.tensor import Tensor


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def randomize_bn(module, rng):
    """Random affine and running statistics on every BN inside ``module``."""
    for bn in [module.branch_3x3.bn, module.branch_1x1.bn, module.branch_identity]:
        if bn is None:
            continue
        c = bn.channels
        bn.gamma.data = rng.uniform(0.5, 1.5, c)
        bn.beta.data = rng.normal(0, 0.5, c)
        bn.running_mean[:] = rng.normal(0, 0.5, c)
        bn.running_var[:] = rng.uniform(0.3, 2.0, c)


def zero(module):
    for p in module.parameters():
        p.data = np.zeros(p.shape)


class TestRepConv:
    def test_single_branch_degeneracy(self):
        rep = RepConv(3, 3)
        rep.reset_parameters(0)
        zero(rep.branch_1x1)
        rep.branch_1x1.bn.gamma.data[:] = 0.0
        rep.branch_identity.gamma.data[:] = 0.0
        rep.eval()
        x = rand((1, 3, 5, 5), 1)
        plain = T.silu(rep.branch_3x3(x))
        np.testing.assert_array_equal(repconv_forward(x, rep).data, plain.data)

    def test_identity_branch_fuses_to_centered_delta(self):
        rep = RepConv(2, 2)
        for br in (rep.branch_3x3, rep.branch_1x1):
            br.conv.weight.data[:] = 0.0
        fused = repconv_fuse(rep).fused
        scale = 1.0 / np.sqrt(1.0 + rep.branch_identity.eps)
        expected = np.zeros((2, 2, 3, 3))
        expected[0, 0, 1, 1] = expected[1, 1, 1, 1] = scale
        np.testing.assert_allclose(fused.weight.data, expected, atol=1e-15)
        assert not fused.bias.data.any()

    def test_one_by_one_branch_lands_at_center(self):
        rep = RepConv(2, 3)
        rep.reset_parameters(1)
        rep.branch_3x3.conv.weight.data[:] = 0.0
        w = rep.branch_1x1.conv.weight.data[:, :, 0, 0].copy()
        k = repconv_fuse(rep).fused.weight.data
        scale = 1.0 / np.sqrt(1.0 + rep.branch_1x1.bn.eps)
        np.testing.assert_allclose(k[:, :, 1, 1], w * scale, atol=1e-15)
        k[:, :, 1, 1] = 0.0
        assert not k.any()

    @pytest.mark.parametrize("c_in,c_out,stride", [(4, 4, 1), (3, 5, 1), (4, 4, 2)])
    def test_fusion_contract_random_draws(self, c_in, c_out, stride):
        rng = np.random.default_rng(c_in * 10 + c_out + stride)
        worst = 0.0
        for draw in range(100):
            rep = RepConv(c_in, c_out, stride)
            rep.reset_parameters(draw)
            randomize_bn(rep, rng)
            rep.eval()
            x = Tensor(rng.standard_normal((1, c_in, 6, 7)))
            fused = repconv_fuse(rep)
            worst = max(worst, np.max(np.abs(rep(x).data - fused(x).data)))
        assert worst < 1e-10

    def test_identity_branch_only_when_shapes_allow(self):
        assert RepConv(4, 4).branch_identity is not None
        assert RepConv(4, 6).branch_identity is None
        assert RepConv(4, 4, 2).branch_identity is None

    def test_stride_two_halves(self):
        rep = RepConv(2, 2, 2)
        rep.reset_parameters(0)
        assert rep(rand((1, 2, 8, 8))).shape == (1, 2, 4, 4)

    def test_fused_has_fewer_parameters(self):
        rep = RepConv(8, 8)
        assert repconv_fuse(rep).num_parameters() < rep.num_parameters()

    def test_fuse_leaves_original_and_refuses_twice(self):
        rep = RepConv(2, 2)
        fused = repconv_fuse(rep)
        assert not rep.deployed and fused.deployed
        with pytest.raises(StateError):
            repconv_fuse(fused)
        with pytest.raises(StateError):
            fused.fuse_()

    def test_deployed_without_fused_params(self):
        rep = RepConv(2, 2)
        rep.deployed = True
        with pytest.raises(StateError):
            rep(rand((1, 2, 3, 3)))

    def test_gradient_train_mode(self):
        rep = RepConv(3, 3)
        rep.reset_parameters(2)
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(rng.standard_normal((2, 3, 4, 4)))
        f = lambda x, *_: T.tsum(T.multiply(rep(x), w))
        assert grad_check(f, [x] + rep.parameters(), sample=10) < 1e-4

    def test_fuse_all_counts(self):
        stage = CSPStage(4, 4)
        neck = FusionNeck((4, 4, 4))
        assert fuse_all(stage) == 1
        assert fuse_all(stage) == 0
        assert fuse_all(neck) == 4


class TestGSConv:
    def test_identity_kernels_with_residual(self):
        gs = GSConv(4)
        zero(gs)
        gs.dw_branch.weight.data[:, 0, 1, 1] = 1.0
        gs.std_branch.weight.data[np.arange(2), np.arange(2), 1, 1] = 1.0
        x = rand((1, 4, 5, 5), 1)
        np.testing.assert_array_equal(gsconv(x, gs).data, 2 * x.data)

    def test_branch_layout(self):
        gs = GSConv(6)
        gs.reset_parameters(0)
        x = rand((1, 6, 4, 4), 2)
        xs, xr = x.data[:, :3], x.data[:, 3:]
        expected = np.concatenate([conv2d(Tensor(xs), gs.dw_branch).data,
                                   conv2d(Tensor(xr), gs.std_branch).data], 1) + x.data
        np.testing.assert_allclose(gsconv(x, gs).data, expected, atol=1e-14)

    def test_projection_drops_residual(self):
        gs = GSConv(3, 8)
        gs.reset_parameters(0)
        assert gs.pre is not None
        assert gs(rand((1, 3, 4, 4))).shape == (1, 8, 4, 4)

    def test_odd_channels_rejected(self):
        with pytest.raises(ConfigError):
            GSConv(5)
        with pytest.raises(ConfigError):
            GSConv(4, 7)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            GSConv(4)(rand((1, 6, 3, 3)))

    def test_mac_count_hand_values(self):
        gs, std, ratio = gsconv_comparison(64, 32)
        assert gs.macs == 9504 * 32 * 32
        assert std.macs == 36864 * 32 * 32
        assert abs(ratio - 0.2578125) < 1e-12

    @pytest.mark.parametrize("channels", [8, 16, 32, 128])
    def test_mac_ratio_bound(self, channels):
        _, _, ratio = gsconv_comparison(channels, 8)
        assert 0 < ratio <= 0.7

    def test_gradient(self):
        gs = GSConv(4)
        gs.reset_parameters(3)
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        w = Tensor(rng.standard_normal((1, 4, 5, 5)))
        f = lambda x, *_: T.tsum(T.multiply(gs(x), w))
        assert grad_check(f, [x] + gs.parameters(), sample=10) < 1e-4


class TestCSPStage:
    def test_dead_transform_path(self):
        st = CSPStage(6, 6)
        st.reset_parameters(0)
        zero(st.refine)
        st.eval()
        x = rand((1, 6, 4, 4), 1)
        hidden = st.shortcut(x)
        expected = st.mix(T.concat_channels([hidden, Tensor(np.zeros(hidden.shape))]))
        out = cspstage(x, st)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, expected.data, atol=1e-14)

    def test_shape_contract(self):
        st = CSPStage(32, 32)
        st.reset_parameters(0)
        assert st(rand((1, 32, 16, 16))).shape == (1, 32, 16, 16)

    def test_plain_variant_has_no_repconv(self):
        assert isinstance(CSPStage(4, 4, rep=False).rep, Conv)
        assert isinstance(CSPStage(4, 4, rep=True).rep, RepConv)

    def test_gradient(self):
        st = CSPStage(4, 4)
        st.reset_parameters(1)
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 4, 4, 4)))
        w = Tensor(rng.standard_normal((2, 4, 4, 4)))
        f = lambda x, *_: T.tsum(T.multiply(st(x), w))
        assert grad_check(f, [x] + st.parameters(), sample=8) < 1e-4


def pyramid(widths=(4, 6, 8), size=32, seed=0, n=1):
    c3, c2, c1 = widths
    rng = np.random.default_rng(seed)
    return PyramidFeatures(Tensor(rng.standard_normal((n, c1, size // 4, size // 4))),
                           Tensor(rng.standard_normal((n, c2, size // 2, size // 2))),
                           Tensor(rng.standard_normal((n, c3, size, size))))


class TestFusionNeck:
    def test_output_shapes_match_inputs(self):
        neck = FusionNeck((8, 16, 32))
        neck.reset_parameters(0)
        f = pyramid((8, 16, 32), 32)
        out = repgfpn_slim_forward(f, neck)
        for a, b in zip(out.levels(), f.levels()):
            assert a.shape == b.shape

    def test_each_node_fuses_one_resampled_and_one_lateral(self):
        neck = FusionNeck((4, 6, 8))
        neck.reset_parameters(0)
        neck(pyramid())
        trace = neck.trace
        assert [t[0] for t in trace] == ["M2", "M3", "N2", "N1"]
        for _, resampled, lateral in trace:
            assert resampled[2:] == lateral[2:]

    def test_laterals_are_gsconv_only_when_slim(self):
        slim, plain = FusionNeck((4, 6, 8), slim=True), FusionNeck((4, 6, 8), slim=False)
        for name in ("lat_p2", "lat_p3", "lat_m2", "lat_p1"):
            assert isinstance(getattr(slim, name), GSConv)
            assert not isinstance(getattr(plain, name), GSConv)
        # downsampling stays a strided standard conv in both variants
        assert slim.down3.conv.stride == 2 and plain.down3.conv.stride == 2

    def test_stride_mismatch(self):
        c3, c2, c1 = 4, 6, 8
        with pytest.raises(ShapeError):
            PyramidFeatures(rand((1, c1, 4, 4)), rand((1, c2, 8, 8)), rand((1, c3, 12, 12)))

    def test_width_mismatch(self):
        neck = FusionNeck((4, 6, 8))
        with pytest.raises(ShapeError):
            neck(pyramid((4, 6, 10)))

    def test_slim_neck_is_cheaper(self):
        slim, plain, ratio = neck_comparison(ModelConfig())
        assert slim.macs <= 0.9 * plain.macs
        assert ratio == slim.macs / plain.macs

    def test_fused_neck_matches(self):
        neck = FusionNeck((4, 6, 8))
        neck.reset_parameters(3)
        neck.eval()
        f = pyramid(seed=4)
        before = neck(f)
        fuse_all(neck)
        after = neck(f)
        for a, b in zip(before.levels(), after.levels()):
            assert np.max(np.abs(a.data - b.data)) < 1e-10

    def test_gradient_through_graph(self):
        neck = FusionNeck((2, 2, 4))
        neck.reset_parameters(5)
        f = pyramid((2, 2, 4), 8, seed=6, n=2)
        rng = np.random.default_rng(7)
        ws = [Tensor(rng.standard_normal(t.shape)) for t in f.levels()]

        def loss(p1, p2, p3, *_):
            out = neck(PyramidFeatures(p1, p2, p3))
            return T.add_n([T.tsum(T.multiply(o, w)) for o, w in zip(out.levels(), ws)])

        assert grad_check(loss, [f.p1, f.p2, f.p3] + neck.parameters(), sample=4) < 1e-4
