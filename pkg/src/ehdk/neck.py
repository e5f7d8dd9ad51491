"""
RepConv, GSConv, CSPStage and the three-level RepGFPN-Slim neck.

RepConv trains as three parallel branches (3x3 conv+BN, 1x1 conv+BN and an
identity BN when shapes allow) and folds them into one biased 3x3 conv for
deployment.  The fold uses the BN running statistics, so the two forms agree
exactly only in eval mode.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError
from .nn import BatchNormParams, Conv, ConvBN, ConvParams, Module, batchnorm2d, conv2d
from .tensor import Tensor


class RepConv(Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.branch_3x3 = ConvBN(c_in, c_out, 3, stride)
        self.branch_1x1 = ConvBN(c_in, c_out, 1, stride)
        self.branch_identity = BatchNormParams(c_in) if c_in == c_out and stride == 1 else None
        self.fused = None
        self.deployed = False

    def forward(self, x):
        return repconv_forward(x, self)

    def fuse_(self):
        """Fold the branches into ``self.fused`` in place and drop them."""
        if self.deployed:
            raise StateError("RepConv is already deployed")
        self.fused = _fused_conv(self)
        self.branch_3x3 = self.branch_1x1 = self.branch_identity = None
        self.deployed = True
        return self


def repconv_forward(x: Tensor, p: RepConv) -> Tensor:
    if p.deployed:
        if p.fused is None:
            raise StateError("deployed RepConv has no fused parameters")
        return T.silu(conv2d(x, p.fused))
    mode = "train" if p.training else "eval"
    terms = [p.branch_3x3(x), p.branch_1x1(x)]
    if p.branch_identity is not None:
        terms.append(batchnorm2d(x, p.branch_identity, mode))
    return T.silu(T.add_n(terms))


def _fold_bn(kernel, bn):
    std = np.sqrt(bn.running_var + bn.eps)
    factor = bn.gamma.data / std
    return kernel * factor[:, None, None, None], bn.beta.data - bn.running_mean * factor


def _fused_conv(p: RepConv) -> ConvParams:
    k3, b3 = _fold_bn(p.branch_3x3.conv.weight.data, p.branch_3x3.bn)
    k1, b1 = _fold_bn(p.branch_1x1.conv.weight.data, p.branch_1x1.bn)
    kernel = k3 + np.pad(k1, ((0, 0), (0, 0), (1, 1), (1, 1)))
    bias = b3 + b1
    if p.branch_identity is not None:
        delta = np.zeros((p.c_out, p.c_in, 3, 3))
        delta[np.arange(p.c_out), np.arange(p.c_in), 1, 1] = 1.0
        kid, bid = _fold_bn(delta, p.branch_identity)
        kernel = kernel + kid
        bias = bias + bid
    fused = ConvParams(p.c_in, p.c_out, 3, p.stride)
    fused.weight.data = kernel
    fused.bias.data = bias
    fused._qualname = f"{p._qualname}.fused" if p._qualname else ""
    return fused


def repconv_fuse(p: RepConv) -> RepConv:
    """Deployed copy of ``p``; the argument is left untouched."""
    if p.deployed:
        raise StateError("cannot fuse an already-deployed RepConv")
    return copy.deepcopy(p).fuse_()


def fuse_all(model: Module) -> int:
    """Deploy every RepConv inside ``model`` in place; returns how many were fused."""
    count = 0
    for _, m in list(model.named_modules()):
        if isinstance(m, RepConv) and not m.deployed:
            m.fuse_()
            count += 1
    return count


class GSConv(Module):
    """Half the channels through a depthwise 3x3, half through a standard 3x3, concatenated."""

    def __init__(self, c_in, c_out=None):
        super().__init__()
        c_out = c_in if c_out is None else c_out
        self.pre = ConvParams(c_in, c_out, 1) if c_in != c_out else None
        if c_out % 2:
            raise ConfigError(f"GSConv needs an even channel count after projection, got {c_out}")
        half = c_out // 2
        self.c_in, self.c_out, self.half = c_in, c_out, half
        self.dw_branch = ConvParams(half, half, 3, groups=half)
        self.std_branch = ConvParams(half, half, 3)

    def forward(self, x):
        return gsconv(x, self)


def gsconv(x: Tensor, p: GSConv) -> Tensor:
    if x.shape[1] != p.c_in:
        raise ShapeError("gsconv: channel mismatch", x.shape, (p.c_in,))
    z = conv2d(x, p.pre) if p.pre is not None else x
    xs, xr = T.split_channels(z, [p.half, p.half])
    y = T.concat_channels([conv2d(xs, p.dw_branch), conv2d(xr, p.std_branch)])
    return y + x if y.shape == x.shape else y


class CSPStage(Module):
    """Shortcut 1x1 path and a [1x1 reduce -> RepConv 3x3 -> Conv 3x3] path, concatenated and 1x1-mixed."""

    def __init__(self, c_in, c_out, rep=True):
        super().__init__()
        hidden = max(c_out // 2, 1)
        self.shortcut = Conv(c_in, hidden, 1)
        self.reduce = Conv(c_in, hidden, 1)
        self.rep = RepConv(hidden, hidden) if rep else Conv(hidden, hidden, 3)
        self.refine = Conv(hidden, hidden, 3)
        self.mix = Conv(2 * hidden, c_out, 1)

    def forward(self, x):
        return cspstage(x, self)


def cspstage(x: Tensor, p: CSPStage) -> Tensor:
    transformed = p.refine(p.rep(p.reduce(x)))
    return p.mix(T.concat_channels([p.shortcut(x), transformed]))


@dataclass
class PyramidFeatures:
    """p1 deepest (stride 32), p2 stride 16, p3 shallowest (stride 8)."""
    p1: Tensor
    p2: Tensor
    p3: Tensor

    def __post_init__(self):
        h1, w1 = self.p1.shape[2:]
        h2, w2 = self.p2.shape[2:]
        h3, w3 = self.p3.shape[2:]
        if (h2, w2) != (2 * h1, 2 * w1) or (h3, w3) != (2 * h2, 2 * w2):
            raise ShapeError("pyramid levels must double in size from p1 to p3",
                             self.p1.shape, self.p2.shape, self.p3.shape)

    def levels(self):
        return [self.p3, self.p2, self.p1]


class FusionNeck(Module):
    """
    Top-down then bottom-up fusion over three levels.

    ``slim=True`` gives RepGFPN-Slim (GSConv laterals, RepConv inside each
    CSPStage); ``slim=False`` gives the plain PAN of the same graph with
    standard 3x3 laterals and plain 3x3 convs in place of RepConv.
    """

    def __init__(self, widths, slim=True):
        super().__init__()
        c3, c2, c1 = widths
        self.widths = (c3, c2, c1)
        self.slim = slim
        lateral = GSConv if slim else (lambda c: Conv(c, c, 3, act=False))
        self.lat_p2 = lateral(c2)
        self.td_m2 = CSPStage(c1 + c2, c2, rep=slim)
        self.lat_p3 = lateral(c3)
        self.td_m3 = CSPStage(c2 + c3, c3, rep=slim)
        self.down3 = Conv(c3, c3, 3, 2)
        self.lat_m2 = lateral(c2)
        self.bu_n2 = CSPStage(c3 + c2, c2, rep=slim)
        self.down2 = Conv(c2, c2, 3, 2)
        self.lat_p1 = lateral(c1)
        self.bu_n1 = CSPStage(c2 + c1, c1, rep=slim)
        self._trace = []

    def _fuse(self, node, name, resampled, lateral):
        if resampled.shape[2:] != lateral.shape[2:]:
            raise ShapeError(f"fusion node {name}: resolution mismatch", resampled.shape, lateral.shape)
        self._trace.append((name, resampled.shape, lateral.shape))
        return node(T.concat_channels([resampled, lateral]))

    def forward(self, f: PyramidFeatures) -> PyramidFeatures:
        for t, c in zip(f.levels(), self.widths):
            if t.shape[1] != c:
                raise ShapeError("neck input width mismatch", t.shape, (c,))
        self._trace = []
        m2 = self._fuse(self.td_m2, "M2", T.upsample_nearest(f.p1, 2), self.lat_p2(f.p2))
        m3 = self._fuse(self.td_m3, "M3", T.upsample_nearest(m2, 2), self.lat_p3(f.p3))
        n3 = m3
        n2 = self._fuse(self.bu_n2, "N2", self.down3(n3), self.lat_m2(m2))
        n1 = self._fuse(self.bu_n1, "N1", self.down2(n2), self.lat_p1(f.p1))
        return PyramidFeatures(n1, n2, n3)

    @property
    def trace(self):
        return list(self._trace)


def repgfpn_slim_forward(f: PyramidFeatures, params: FusionNeck) -> PyramidFeatures:
    return params(f)
