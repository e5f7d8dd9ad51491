"""
Cascaded group attention and the C2PSA-CGA block.

Channels are split into ``h`` groups.  Group ``g`` attends over all spatial
tokens of its own input, and from the second group on that input is the raw
channel slice plus the previous group's output, so information flows down
the cascade.  Queries pass through a 3x3 depthwise "token interaction" conv
before the dot product.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Conv, ConvParams, Module, conv2d
from .tensor import Tensor


class GroupParams(Module):
    def __init__(self, dim):
        super().__init__()
        if dim < 1:
            raise ConfigError("attention group dimension must be at least 1")
        self.dim = dim
        self.wq = ConvParams(dim, dim, 1, bias=False)
        self.wk = ConvParams(dim, dim, 1, bias=False)
        self.wv = ConvParams(dim, dim, 1, bias=False)
        self.token_interaction = ConvParams(dim, dim, 3, groups=dim)


class AttentionGroupParams(Module):
    """Per-group projections for ``h`` groups plus the 1x1 output mix."""

    def __init__(self, channels, h):
        super().__init__()
        if h < 1 or channels % h:
            raise ConfigError(f"group count {h} must divide channel count {channels}")
        self.channels = channels
        self.h = h
        self.d_k = channels // h
        self.groups = [GroupParams(self.d_k) for _ in range(h)]
        self.proj = ConvParams(channels, channels, 1)

    def forward(self, x):
        return cascaded_group_attention(x, self)


def _tokens(x):
    n, d, h, w = x.shape
    return T.transpose(T.reshape(x, (n, d, h * w)), (0, 2, 1))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor):
    """``softmax(q k^T / sqrt(d)) v`` over (n, tokens, d) tensors; returns (output, weights)."""
    d = q.shape[-1]
    if d == 0:
        raise ConfigError("key dimension d_k must be positive")
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v), weights


def group_self_attention(x_g: Tensor, p: GroupParams, return_weights=False):
    if x_g.ndim != 4 or x_g.shape[1] != p.dim:
        raise ShapeError("group_self_attention: channel mismatch", x_g.shape, (p.dim,))
    n, d, h, w = x_g.shape
    q = conv2d(conv2d(x_g, p.wq), p.token_interaction)
    k = conv2d(x_g, p.wk)
    v = conv2d(x_g, p.wv)
    out, weights = scaled_dot_attention(_tokens(q), _tokens(k), _tokens(v))
    out = T.reshape(T.transpose(out, (0, 2, 1)), (n, d, h, w))
    return (out, weights) if return_weights else out


def cascaded_group_attention(x: Tensor, p: AttentionGroupParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ConfigError(f"input with {x.shape[1] if x.ndim == 4 else '?'} channels "
                          f"does not match attention over {p.channels} channels")
    slices = T.split_channels(x, [p.d_k] * p.h)
    outputs = []
    prev = None
    for g, params in enumerate(p.groups):
        inp = slices[g] if prev is None else slices[g] + prev
        prev = group_self_attention(inp, params)
        outputs.append(prev)
    return conv2d(T.concat_channels(outputs), p.proj)


class C2PSACGA(Module):
    """1x1 expand (x2) -> cascaded group attention -> 1x1 compress, plus residual."""

    def __init__(self, c, h=2):
        super().__init__()
        if (2 * c) % h:
            raise ConfigError(f"group count {h} must divide expanded width {2 * c}")
        self.expand = Conv(c, 2 * c, 1)
        self.attn = AttentionGroupParams(2 * c, h)
        self.compress = ConvParams(2 * c, c, 1)

    def forward(self, x):
        return c2psa_cga_block(x, self)


def c2psa_cga_block(x: Tensor, params: C2PSACGA) -> Tensor:
    y = params.expand(x)
    y = cascaded_group_attention(y, params.attn)
    return conv2d(y, params.compress) + x


class C2PSAPlain(Module):
    """Attention-free stand-in: 1x1 expand -> pointwise feed-forward -> 1x1 compress, plus residual."""

    def __init__(self, c):
        super().__init__()
        self.expand = Conv(c, 2 * c, 1)
        self.mid = Conv(2 * c, 2 * c, 1)
        self.compress = ConvParams(2 * c, c, 1)

    def forward(self, x):
        return conv2d(self.mid(self.expand(x)), self.compress) + x
