"""
The finite-difference suite run by ``ehdk gradcheck`` and the test-suite.

Every case reduces its op's output to a scalar through a fixed random
weighting, so each output element contributes a distinct gradient.  Linear and
single elementwise ops must agree to 1e-6, composed blocks to 1e-4 and the full
detection loss to 1e-3.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionGroupParams, C2PSACGA, cascaded_group_attention, scaled_dot_attention
from .boxes import Box, assign_targets
from .gradcheck import grad_check
from .loss import PrototypeBank, bce_with_logits, detection_loss, overlap_loss, prototype_cross_entropy
from .model import ModelConfig, build_model, decode_op, forward_detect
from .neck import CSPStage, GSConv, RepConv
from .nn import BatchNormParams, ConvParams, batchnorm2d, conv2d
from .tensor import Tensor
from .wavelet import WaveletBands, WTConvParams, WTCoordBottleneck, add_coord_channels, iwt2, wt2

OP_TOL = 1e-6
BLOCK_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class GradCase:
    name: str
    kind: str           # "op", "block" or "loss"
    build: Callable     # rng -> (f, inputs, sample)

    @property
    def tol(self):
        return {"op": OP_TOL, "block": BLOCK_TOL, "loss": LOSS_TOL}[self.kind]


@dataclass
class GradOutcome:
    name: str
    kind: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol


def _t(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def _params(module, rng):
    module.reset_parameters(int(rng.integers(1 << 30)))
    return module.parameters()


def _unary(op, shape=(2, 3, 4, 5), low=-2.0, high=2.0):
    def build(rng):
        x = _t(rng, *shape, low=low, high=high)
        w = rng.standard_normal(op(x).shape)
        return (lambda x: T.tsum(T.multiply(op(x), Tensor(w)))), [x], None
    return build


def _binary(op, shape=(3, 4)):
    def build(rng):
        a, b = _t(rng, *shape), _t(rng, *shape)
        w = rng.standard_normal(op(a, b).shape)
        return (lambda a, b: T.tsum(T.multiply(op(a, b), Tensor(w)))), [a, b], None
    return build


def _conv_case(c_in, c_out, k, stride, groups, size=7):
    def build(rng):
        p = ConvParams(c_in, c_out, k, stride, groups=groups)
        params = _params(p, rng)
        x = _t(rng, 2, c_in, size, size)
        w = rng.standard_normal(conv2d(x, p).shape)
        return (lambda x, *_: T.tsum(T.multiply(conv2d(x, p), Tensor(w)))), [x] + params, None
    return build


def _bn_case(mode):
    def build(rng):
        p = BatchNormParams(3)
        p.gamma.data = rng.uniform(0.5, 1.5, 3)
        p.beta.data = rng.uniform(-0.5, 0.5, 3)
        p.set_buffer("running_mean", rng.uniform(-0.2, 0.2, 3))
        p.set_buffer("running_var", rng.uniform(0.5, 1.5, 3))
        x = _t(rng, 4, 3, 3, 3)
        w = rng.standard_normal(x.shape)
        state = copy.deepcopy(p._buffers)

        def f(x, *_):
            p._buffers = copy.deepcopy(state)
            return T.tsum(T.multiply(batchnorm2d(x, p, mode), Tensor(w)))
        return f, [x, p.gamma, p.beta], None
    return build


def _module_case(make, shape, sample=None, train=True):
    def build(rng):
        m = make()
        m.reset_parameters(int(rng.integers(1 << 30)))
        m.assign_names()
        m.train(train)
        params = m.parameters()
        x = _t(rng, *shape)
        w = rng.standard_normal(m(x).shape)
        return (lambda x, *_: T.tsum(T.multiply(m(x), Tensor(w)))), [x] + params, sample
    return build


def _wt2_case(shape):
    def build(rng):
        x = _t(rng, *shape)
        ws = [rng.standard_normal(b.shape) for b in (lambda b: (b.ll, b.hl, b.lh, b.hh))(wt2(x))]

        def f(x):
            b = wt2(x)
            return T.add_n([T.tsum(T.multiply(t, Tensor(w))) for t, w in zip((b.ll, b.hl, b.lh, b.hh), ws)])
        return f, [x], None
    return build


def _iwt2_case(rng):
    bands = [_t(rng, 2, 2, 3, 4) for _ in range(4)]
    w = rng.standard_normal((2, 2, 5, 7))

    def f(*bs):
        return T.tsum(T.multiply(iwt2(WaveletBands(*bs, height=5, width=7)), Tensor(w)))
    return f, bands, None


def _attention_case(rng):
    q, k, v = _t(rng, 2, 6, 4), _t(rng, 2, 6, 4), _t(rng, 2, 6, 3)
    w = rng.standard_normal((2, 6, 3))
    return (lambda q, k, v: T.tsum(T.multiply(scaled_dot_attention(q, k, v)[0], Tensor(w)))), [q, k, v], None


def _cga_case(rng):
    p = AttentionGroupParams(8, 2)
    p.reset_parameters(int(rng.integers(1 << 30)))
    x = _t(rng, 2, 8, 4, 4)
    w = rng.standard_normal((2, 8, 4, 4))
    return (lambda x, *_: T.tsum(T.multiply(cascaded_group_attention(x, p), Tensor(w)))), [x] + p.parameters(), 6


def _boxes(rng, k):
    xy = rng.uniform(0, 50, (k, 2))
    wh = rng.uniform(5, 30, (k, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def _overlap_case(generalized):
    def build(rng):
        a = Tensor(_boxes(rng, 6))
        b = _boxes(rng, 6)
        b[:3] = a.data[:3] + rng.uniform(-4, 4, (3, 4))
        b[:, 2:] = np.maximum(b[:, 2:], b[:, :2] + 1)
        return (lambda a: overlap_loss(a, b, generalized)), [a], None
    return build


def _bce_case(rng):
    x = _t(rng, 5, 3, low=-4, high=4)
    t = rng.integers(0, 2, (5, 3)).astype(float)
    return (lambda x: bce_with_logits(x, t, 0.3)), [x], None


def _proto_case(rng):
    e = _t(rng, 10, 4)
    labels = rng.integers(0, 3, 10)
    protos = rng.standard_normal((3, 4))
    return (lambda e: prototype_cross_entropy(e, labels, protos)[0]), [e], None


def _decode_case(rng):
    raw = _t(rng, 6, 4, low=-2, high=2)
    cells = rng.integers(0, 8, (6, 2))
    strides = rng.choice([8.0, 16.0, 32.0], 6)
    w = rng.standard_normal((6, 4))
    return (lambda r: T.tsum(T.multiply(decode_op(r, cells, strides), Tensor(w)))), [raw], None


def tiny_model_config(**overrides):
    kw = dict(input_size=64, widths=(4, 8, 8, 16), cga_groups=2, head_width=4, embed_dim=4)
    kw.update(overrides)
    return ModelConfig(**kw)


def _model_objectness_case(rng):
    model = build_model(tiny_model_config(), seed=int(rng.integers(1 << 30)))
    x = _t(rng, 1, 1, 64, 64, low=0.0, high=1.0)

    def f(x):
        outs = forward_detect(model, x)
        return T.add_n([T.tsum(o.obj) for o in outs])
    return f, [x], 24


def toy_batch(rng, size=64):
    """Two images with a handful of boxes spread across the three strides."""
    gts = [
        [(Box(4.0, 6.0, 14.0, 15.0), 0), (Box(20.0, 18.0, 52.0, 50.0), 1)],
        [(Box(30.0, 8.0, 46.0, 26.0), 1), (Box(2.0, 30.0, 10.0, 38.0), 0)],
    ]
    targets = [assign_targets(size, g) for g in gts]
    images = rng.uniform(0, 1, (2, 1, size, size))
    return images, targets


def _full_loss_case(rng):
    model = build_model(tiny_model_config(), seed=int(rng.integers(1 << 30)))
    images, targets = toy_batch(rng)
    x = Tensor(images)
    # The bank is a constant in backward; momentum 1 keeps a populated bank fixed under the in-loss update.
    base = PrototypeBank(2, 4, momentum=1.0)
    base.update(rng.standard_normal((4, 4)), [0, 0, 1, 1])
    head_params = [p for n, p in model.named_parameters() if n.startswith("head.")][:6]
    state = {id(m): copy.deepcopy(m._buffers) for _, m in model.named_modules()}

    def f(x, *_):
        for _, m in model.named_modules():
            m._buffers = copy.deepcopy(state[id(m)])
        outs = forward_detect(model, x)
        return detection_loss(outs, targets, base.copy()).total
    return f, [x] + head_params, 12


def gradient_cases():
    return [
        GradCase("add", "op", _binary(T.add)),
        GradCase("sub", "op", _binary(T.sub)),
        GradCase("multiply", "op", _binary(T.multiply)),
        GradCase("add_n", "op", _binary(lambda a, b: T.add_n([a, b, a]))),
        GradCase("matmul", "op", lambda rng: _matmul_case(rng)),
        GradCase("scale", "op", _unary(lambda x: T.scale(x, -1.7))),
        GradCase("add_scalar", "op", _unary(lambda x: T.add_scalar(x, 0.3))),
        GradCase("sum_axis", "op", _unary(lambda x: T.tsum(x, axis=(1, 3)))),
        GradCase("mean_axis", "op", _unary(lambda x: T.tmean(x, axis=2, keepdims=True))),
        GradCase("reshape", "op", _unary(lambda x: T.reshape(x, (6, 20)))),
        GradCase("transpose", "op", _unary(lambda x: T.transpose(x, (0, 2, 3, 1)))),
        GradCase("getitem_slice", "op", _unary(lambda x: T.getitem(x, (slice(None), slice(1, 3))))),
        GradCase("getitem_gather", "op", _unary(lambda x: T.getitem(T.reshape(x, (24, 5)), np.array([0, 3, 3, 7])))),
        GradCase("concat", "op", _binary(lambda a, b: T.concat([a, b, a], axis=1))),
        GradCase("split_channels", "op", _unary(lambda x: T.split_channels(x, [1, 2])[1])),
        GradCase("upsample_nearest", "op", _unary(lambda x: T.upsample_nearest(x, 2))),
        GradCase("avgpool_region", "op", _unary(lambda x: T.avgpool_region(x, (1, 1, 3, 4)))),
        GradCase("stack_rows", "op", _binary(lambda a, b: T.stack_rows([a, b]))),
        GradCase("sigmoid", "op", _unary(T.sigmoid)),
        GradCase("silu", "op", _unary(T.silu)),
        GradCase("exp", "op", _unary(T.exp)),
        GradCase("softmax", "op", _unary(lambda x: T.softmax(x, axis=-1))),
        GradCase("conv3x3", "op", _conv_case(3, 4, 3, 1, 1)),
        GradCase("conv3x3_stride2", "op", _conv_case(3, 4, 3, 2, 1)),
        GradCase("conv1x1", "op", _conv_case(3, 5, 1, 1, 1)),
        GradCase("conv5x5_depthwise", "op", _conv_case(4, 4, 5, 1, 4)),
        GradCase("conv3x3_depthwise_stride2", "op", _conv_case(4, 4, 3, 2, 4)),
        GradCase("conv3x3_grouped", "op", _conv_case(4, 6, 3, 1, 2)),
        GradCase("batchnorm_train", "op", _bn_case("train")),
        GradCase("batchnorm_eval", "op", _bn_case("eval")),
        GradCase("wt2_even", "op", _wt2_case((2, 2, 6, 8))),
        GradCase("wt2_odd", "op", _wt2_case((1, 2, 5, 7))),
        GradCase("iwt2", "op", _iwt2_case),
        GradCase("coord_channels", "op", _unary(add_coord_channels)),
        GradCase("scaled_dot_attention", "op", _attention_case),
        GradCase("giou_loss", "op", _overlap_case(True)),
        GradCase("iou_loss", "op", _overlap_case(False)),
        GradCase("bce_with_logits", "op", _bce_case),
        GradCase("prototype_ce", "op", _proto_case),
        GradCase("decode", "op", _decode_case),
        GradCase("wtconv", "block", _module_case(lambda: WTConvParams(6), (2, 6, 7, 9), sample=8)),
        GradCase("c3k2_wtcoord", "block", _module_case(lambda: WTCoordBottleneck(4), (2, 4, 8, 8), sample=8)),
        GradCase("cga", "block", _cga_case),
        GradCase("c2psa_cga", "block", _module_case(lambda: C2PSACGA(8, 2), (2, 8, 4, 4), sample=6)),
        GradCase("repconv", "block", _module_case(lambda: RepConv(4, 4), (3, 4, 5, 5), sample=8)),
        GradCase("gsconv", "block", _module_case(lambda: GSConv(4, 6), (2, 4, 6, 6), sample=8)),
        GradCase("cspstage", "block", _module_case(lambda: CSPStage(6, 8), (2, 6, 6, 6), sample=6)),
        GradCase("model_objectness_64", "block", _model_objectness_case),
        GradCase("full_loss_64", "loss", _full_loss_case),
    ]


def _matmul_case(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    return (lambda a, b: T.tsum(T.multiply(T.matmul(a, b), Tensor(w)))), [a, b], None


def run_case(case: GradCase, seed=0) -> GradOutcome:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    f, inputs, sample = case.build(rng)
    err = grad_check(f, inputs, sample=sample, seed=seed)
    return GradOutcome(case.name, case.kind, err, case.tol)


def run_suite(seed=0, names=None, progress=None):
    out = []
    for case in gradient_cases():
        if names is not None and case.name not in names:
            continue
        res = run_case(case, seed)
        out.append(res)
        if progress is not None:
            progress(res)
    return out
