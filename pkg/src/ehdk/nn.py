"""
Parameter containers, the module tree, convolution and batch normalization.

Modules keep their parameters as :class:`Parameter` attributes (or inside
child modules / lists of modules); traversal follows attribute insertion
order so the flat parameter order is stable and defines the checkpoint
layout.  Initialization is keyed on the dotted parameter name, which keeps
shared parts of two differently-toggled models bit-identical.
"""
from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, ShapeError, StatisticsError
from .tensor import Tensor, make_result

_scope: list = []


class Parameter(Tensor):
    __slots__ = ("init", "fan_in")

    def __init__(self, shape, init="uniform", fan_in=1):
        super().__init__(np.zeros(shape, dtype=T.DEFAULT_DTYPE), requires_grad=True)
        self.init = init
        self.fan_in = max(int(fan_in), 1)
        if init != "uniform":
            self.reset(None)

    def reset(self, rng):
        kind = self.init
        if kind == "uniform":
            bound = 1.0 / np.sqrt(self.fan_in)
            self.data = rng.uniform(-bound, bound, size=self.shape)
        elif kind == "zeros":
            self.data = np.zeros(self.shape)
        elif kind == "ones":
            self.data = np.ones(self.shape)
        elif isinstance(kind, tuple) and kind[0] == "const":
            self.data = np.full(self.shape, float(kind[1]))
        else:
            raise ConfigError(f"unknown initializer {kind!r}")


class Module:
    def __init__(self):
        self.training = True
        self._buffers = {}
        self._qualname = ""

    # -- tree traversal -------------------------------------------------------
    def _items(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{key}.{i}", v

    def named_modules(self, prefix="") -> Iterator[tuple]:
        yield prefix, self
        for key, value in self._items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix="") -> Iterator[tuple]:
        for key, value in self._items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for mod_name, mod in self.named_modules(prefix):
            for key, arr in mod._buffers.items():
                yield (f"{mod_name}.{key}" if mod_name else key), mod, key

    def register_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=T.DEFAULT_DTYPE)

    def buffer(self, name):
        return self._buffers[name]

    def set_buffer(self, name, array):
        self._buffers[name] = np.asarray(array, dtype=T.DEFAULT_DTYPE)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    # -- state -----------------------------------------------------------------
    def train(self, mode=True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def reset_parameters(self, seed):
        for name, p in self.named_parameters():
            p.reset(np.random.default_rng([int(seed), zlib.crc32(name.encode())]))
        return self

    def assign_names(self, prefix=""):
        for name, m in self.named_modules(prefix):
            m._qualname = name
        return self

    def __call__(self, *args, **kwargs):
        _scope.append(self._qualname)
        try:
            return self.forward(*args, **kwargs)
        finally:
            _scope.pop()

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def current_scope():
    for name in reversed(_scope):
        if name:
            return name
    return ""


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class ConvParams(Module):
    """Weights (out, in/groups, k, k), optional bias, stride, symmetric zero padding, groups."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 groups=1, bias=True, weight_init="uniform"):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else tuple(kernel_size)
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"only odd kernels are supported, got {kh}x{kw}")
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}")
        if stride < 1:
            raise ConfigError(f"stride must be positive, got {stride}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = (kh, kw)
        self.stride = int(stride)
        self.padding = kh // 2 if padding is None else int(padding)
        self.groups = int(groups)
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Parameter((out_channels, in_channels // groups, kh, kw), weight_init, fan_in)
        self.bias = Parameter((out_channels,), "uniform" if weight_init == "uniform" else "zeros",
                              fan_in) if bias else None

    def num_macs(self, h_out, w_out, n=1):
        kh, kw = self.kernel_size
        return n * self.out_channels * h_out * w_out * (self.in_channels // self.groups) * kh * kw


class BatchNormParams(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        if eps <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ConfigError("momentum must lie in (0, 1)")
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Parameter((channels,), "ones")
        self.beta = Parameter((channels,), "zeros")
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    @property
    def running_mean(self):
        return self._buffers["running_mean"]

    @property
    def running_var(self):
        return self._buffers["running_var"]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(size, k, pad, stride):
    return (size + 2 * pad - k) // stride + 1


def _dense_forward(xp, w, stride, ho, wo):
    o, c, kh, kw = w.shape
    if kh == 1 and kw == 1:
        xs = xp[:, :, :(ho - 1) * stride + 1:stride, :(wo - 1) * stride + 1:stride]
        n = xs.shape[0]
        out = w.reshape(o, c) @ xs.reshape(n, c, ho * wo)
        return out.reshape(n, o, ho, wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _dense_backward(g, xp, w, stride):
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    dxp = np.zeros_like(xp)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    if kh == 1 and kw == 1:
        xs = xp[:, :, :hs:stride, :ws:stride]
        dw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3])).reshape(o, c, 1, 1)
        dxs = w.reshape(o, c).T @ g.reshape(n, o, ho * wo)
        dxp[:, :, :hs:stride, :ws:stride] = dxs.reshape(n, c, ho, wo)
        return dxp, dw
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    dwin = np.tensordot(g, w, axes=([1], [0]))  # n, ho, wo, c, kh, kw
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp, dw


def _depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    _, _, kh, kw = w.shape
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + hs:stride, j:j + ws:stride] * w[:, 0, i, j][None, :, None, None]
    return out


def _depthwise_backward(g, xp, w, stride):
    _, _, ho, wo = g.shape
    _, _, kh, kw = w.shape
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + hs:stride, j:j + ws:stride]
            dw[:, 0, i, j] = (g * xs).sum(axis=(0, 2, 3))
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += g * w[:, 0, i, j][None, :, None, None]
    return dxp, dw


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation with symmetric zero padding (NCHW)."""
    if x.ndim != 4:
        raise ShapeError("conv2d expects an NCHW tensor", x.shape)
    n, c, h, w_ = x.shape
    if c != p.in_channels:
        raise ShapeError("conv2d: input channels do not match weights", x.shape, p.weight.shape)
    kh, kw = p.kernel_size
    pad, stride, groups = p.padding, p.stride, p.groups
    if h + 2 * pad < kh or w_ + 2 * pad < kw:
        raise ShapeError("conv2d: padded input smaller than kernel", x.shape, p.weight.shape)
    ho, wo = _out_size(h, kh, pad, stride), _out_size(w_, kw, pad, stride)
    wd = p.weight.data
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    depthwise = groups == c and groups == p.out_channels and groups > 1
    if depthwise:
        out = _depthwise_forward(xp, wd, stride, ho, wo)
    elif groups == 1:
        out = _dense_forward(xp, wd, stride, ho, wo)
    else:
        cg, og = c // groups, p.out_channels // groups
        out = np.concatenate([
            _dense_forward(xp[:, g * cg:(g + 1) * cg], wd[g * og:(g + 1) * og], stride, ho, wo)
            for g in range(groups)], axis=1)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]
    T.count_macs(p.num_macs(ho, wo, n))

    def backward(g):
        if depthwise:
            dxp, dw = _depthwise_backward(g, xp, wd, stride)
        elif groups == 1:
            dxp, dw = _dense_backward(g, xp, wd, stride)
        else:
            cg, og = c // groups, p.out_channels // groups
            parts = [_dense_backward(g[:, k * og:(k + 1) * og], xp[:, k * cg:(k + 1) * cg],
                                     wd[k * og:(k + 1) * og], stride) for k in range(groups)]
            dxp = np.concatenate([d for d, _ in parts], axis=1)
            dw = np.concatenate([d for _, d in parts], axis=0)
        dx = dxp[:, :, pad:pad + h, pad:pad + w_] if pad else dxp
        grads = [dx, dw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return make_result(out, parents, backward, "conv2d")


def downsample_conv(x: Tensor, p: ConvParams) -> Tensor:
    if p.stride != 2:
        raise ConfigError(f"downsample_conv needs a stride-2 conv, got stride {p.stride}")
    return conv2d(x, p)


def batchnorm2d(x: Tensor, p: BatchNormParams, mode="train") -> Tensor:
    """Batch normalization over (n, h, w) per channel; ``mode`` is 'train' or 'eval'."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError("batchnorm2d: channel count mismatch", x.shape, (p.channels,))
    n, c, h, w = x.shape
    xd = x.data
    gamma, beta = p.gamma.data, p.beta.data
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise StatisticsError(f"batch statistics need at least 2 values per channel, got {m}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        rm = p.running_mean
        rv = p.running_var
        p.set_buffer("running_mean", (1 - p.momentum) * rm + p.momentum * mean)
        p.set_buffer("running_var", (1 - p.momentum) * rv + p.momentum * var * m / (m - 1))
    elif mode == "eval":
        m = None
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma[None, :, None, None]
        if m is None:
            dx = dxhat * inv[None, :, None, None]
        else:
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return dx, dgamma, dbeta

    return make_result(out, (x, p.gamma, p.beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv(Module):
    """Bias-free convolution, batch normalization, then SiLU (``act=False`` stops after the BN)."""

    def __init__(self, c_in, c_out, k=1, s=1, groups=1, act=True, weight_init="uniform"):
        super().__init__()
        self.conv = ConvParams(c_in, c_out, k, s, groups=groups, bias=False, weight_init=weight_init)
        self.bn = BatchNormParams(c_out)
        self.act = act

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        y = batchnorm2d(conv2d(x, self.conv), self.bn, "train" if self.training else "eval")
        return T.silu(y) if self.act else y


class ConvBN(Module):
    """Bias-free convolution followed by batch normalization (no activation)."""

    def __init__(self, c_in, c_out, k=3, s=1, groups=1):
        super().__init__()
        self.conv = ConvParams(c_in, c_out, k, s, groups=groups, bias=False)
        self.bn = BatchNormParams(c_out)

    def forward(self, x):
        return batchnorm2d(conv2d(x, self.conv), self.bn, "train" if self.training else "eval")
