"""
Haar wavelet convolution, coordinate channels and the C3k2-WTCoord block.

One decomposition level with the orthonormal Haar pair.  For a 2x2 patch
``[[a, b], [c, d]]``::

    ll = (a + b + c + d) / 2      hl = (a - b + c - d) / 2
    lh = (a + b - c - d) / 2      hh = (a - b - c + d) / 2

The analysis matrix is symmetric and orthogonal, so synthesis applies the
same four filters to the upsampled bands and reconstruction is exact.
Odd spatial sizes are reflection-padded on the bottom/right before analysis
and cropped again after synthesis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv, ConvParams, Module, conv2d
from .tensor import Tensor, make_result

# rows: ll, hl, lh, hh; columns: a, b, c, d of each 2x2 patch
HAAR = 0.5 * np.array([
    [1.0, 1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
])


@dataclass(frozen=True)
class HaarFilterBank:
    lowpass: np.ndarray
    highpass_h: np.ndarray
    highpass_v: np.ndarray
    highpass_d: np.ndarray

    @classmethod
    def orthonormal(cls):
        return cls(*(row.reshape(2, 2) for row in HAAR))

    def filters(self):
        return [self.lowpass, self.highpass_h, self.highpass_v, self.highpass_d]


@dataclass
class WaveletBands:
    ll: Tensor
    hl: Tensor
    lh: Tensor
    hh: Tensor
    height: int = 0   # source size before reflection padding
    width: int = 0

    def __post_init__(self):
        shapes = {b.shape for b in self.bands()}
        if len(shapes) != 1:
            raise ShapeError("wavelet bands must share one shape", *sorted(shapes))
        _, _, h2, w2 = self.ll.shape
        if not self.height:
            self.height = 2 * h2
        if not self.width:
            self.width = 2 * w2

    def bands(self):
        return [self.ll, self.hl, self.lh, self.hh]

    def energy(self):
        return float(sum((b.data ** 2).sum() for b in self.bands()))


def _reflect_pad_odd(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x
    if (ph and h < 2) or (pw and w < 2):
        # a single row/column reflects onto itself
        out = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    else:
        out = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")

    def backward(g):
        g = g.copy()
        if ph:
            src = h - 2 if h >= 2 else 0
            g[:, :, src, :] += g[:, :, h, :]
        if pw:
            src = w - 2 if w >= 2 else 0
            g[:, :, :, src] += g[:, :, :, w]
        return (g[:, :, :h, :w],)

    return make_result(out, (x,), backward, "reflect_pad")


def _analysis(xd):
    a = xd[:, :, 0::2, 0::2]
    b = xd[:, :, 0::2, 1::2]
    c = xd[:, :, 1::2, 0::2]
    d = xd[:, :, 1::2, 1::2]
    return np.stack([
        (a + b + c + d) * 0.5,
        (a - b + c - d) * 0.5,
        (a + b - c - d) * 0.5,
        (a - b - c + d) * 0.5,
    ])


def _synthesis(ll, hl, lh, hh):
    n, c, h2, w2 = ll.shape
    out = np.empty((n, c, 2 * h2, 2 * w2), dtype=ll.dtype)
    out[:, :, 0::2, 0::2] = (ll + hl + lh + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - hl + lh - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + hl - lh - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - hl - lh + hh) * 0.5
    return out


def wt2(x: Tensor) -> WaveletBands:
    """Single-level 2-D Haar analysis of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError("wt2 expects an NCHW tensor", x.shape)
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("wt2 needs non-empty spatial dims", x.shape)
    xp = _reflect_pad_odd(x)
    stacked = make_result(_analysis(xp.data), (xp,),
                          lambda g: (_synthesis(g[0], g[1], g[2], g[3]),), "wt2")
    return WaveletBands(stacked[0], stacked[1], stacked[2], stacked[3], h, w)


def iwt2(b: WaveletBands) -> Tensor:
    """Inverse of :func:`wt2`; crops any reflection padding added on analysis."""
    bands = b.bands()
    ref = bands[0].shape
    for t in bands[1:]:
        if t.shape != ref:
            raise ShapeError("iwt2: band shapes differ", ref, t.shape)

    def backward(g):
        a = _analysis(g)
        return a[0], a[1], a[2], a[3]

    out = make_result(_synthesis(*(t.data for t in bands)), bands, backward, "iwt2")
    if out.shape[2] != b.height or out.shape[3] != b.width:
        out = out[:, :, :b.height, :b.width]
    return out


class WTConvParams(Module):
    """3x3 conv on the low band, independent 5x5 depthwise convs on the three detail bands."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.ll_conv = ConvParams(channels, channels, 3)
        self.band_convs = [ConvParams(channels, channels, 5, groups=channels) for _ in range(3)]

    def set_identity(self):
        for p in [self.ll_conv, *self.band_convs]:
            k = p.kernel_size[0] // 2
            w = np.zeros(p.weight.shape)
            if p.groups == 1:
                w[np.arange(p.out_channels), np.arange(p.out_channels), k, k] = 1.0
            else:
                w[:, 0, k, k] = 1.0
            p.weight.data = w
            p.bias.data = np.zeros(p.out_channels)
        return self

    def forward(self, x):
        return wtconv(x, self)


def wtconv(x: Tensor, p: WTConvParams) -> Tensor:
    if x.shape[1] != p.channels:
        raise ShapeError("wtconv: channel mismatch", x.shape, (p.channels,))
    bands = wt2(x)
    filtered = WaveletBands(
        conv2d(bands.ll, p.ll_conv),
        conv2d(bands.hl, p.band_convs[0]),
        conv2d(bands.lh, p.band_convs[1]),
        conv2d(bands.hh, p.band_convs[2]),
        bands.height, bands.width)
    return iwt2(filtered)


def coord_planes(h, w, dtype=np.float64):
    """Row plane ``2i/H - 1`` and column plane ``2j/W - 1``, each (h, w)."""
    rows = 2.0 * np.arange(h, dtype=dtype) / h - 1.0
    cols = 2.0 * np.arange(w, dtype=dtype) / w - 1.0
    return np.broadcast_to(rows[:, None], (h, w)), np.broadcast_to(cols[None, :], (h, w))


def add_coord_channels(x: Tensor) -> Tensor:
    """Append the row and column coordinate channels (in that order)."""
    if x.ndim != 4:
        raise ShapeError("add_coord_channels expects an NCHW tensor", x.shape)
    n, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("add_coord_channels needs h, w >= 1", x.shape)
    r, c = coord_planes(h, w, x.dtype)
    planes = np.broadcast_to(np.stack([r, c])[None], (n, 2, h, w)).copy()
    return T.concat_channels([x, Tensor(planes, dtype=x.dtype)])


class WTCoordBottleneck(Module):
    """conv3x3 -> SiLU -> WTConv -> coordinate channels -> conv3x3 -> SiLU, plus shortcut."""

    def __init__(self, c_in, c_out=None, shortcut=True):
        super().__init__()
        c_out = c_in if c_out is None else c_out
        if shortcut and c_in != c_out:
            raise ConfigError(f"shortcut needs equal channels, got {c_in} -> {c_out}")
        self.cv1 = ConvParams(c_in, c_out, 3)
        self.wt = WTConvParams(c_out)
        self.cv2 = ConvParams(c_out + 2, c_out, 3)
        self.shortcut = shortcut

    def forward(self, x):
        return c3k2_wtcoord_block(x, self)


def c3k2_wtcoord_block(x: Tensor, params: WTCoordBottleneck) -> Tensor:
    y = T.silu(conv2d(x, params.cv1))
    y = wtconv(y, params.wt)
    y = T.silu(conv2d(add_coord_channels(y), params.cv2))
    return y + x if params.shortcut else y


class Bottleneck(Module):
    """Plain two-conv residual bottleneck used when the wavelet block is switched off."""

    def __init__(self, c, shortcut=True):
        super().__init__()
        self.cv1 = ConvParams(c, c, 3)
        self.cv2 = ConvParams(c, c, 3)
        self.shortcut = shortcut

    def forward(self, x):
        y = T.silu(conv2d(T.silu(conv2d(x, self.cv1)), self.cv2))
        return y + x if self.shortcut else y


class C3k2(Module):
    """Split 1x1 projection, one bottleneck on half the channels, concat, 1x1 mix."""

    def __init__(self, c, wavelet=True):
        super().__init__()
        if c % 2:
            raise ConfigError(f"C3k2 needs an even channel count, got {c}")
        h = c // 2
        self.hidden = h
        self.cv1 = Conv(c, 2 * h, 1)
        self.m = WTCoordBottleneck(h) if wavelet else Bottleneck(h)
        self.cv2 = Conv(3 * h, c, 1)

    def forward(self, x):
        y = self.cv1(x)
        a, b = T.split_channels(y, [self.hidden, self.hidden])
        return self.cv2(T.concat_channels([a, b, self.m(b)]))
