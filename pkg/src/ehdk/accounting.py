"""
Parameter and multiply-accumulate accounting.

MACs are counted by running one forward pass at batch size 1 with a hook that
every convolution and matmul reports to, attributed to the innermost named
module on the call stack.  Elementwise work (activations, BN, pooling) is not
counted, matching the usual convention for conv-net FLOP tables.  One MAC is
two FLOPs.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .model import Detector, ModelConfig, forward_detect
from .neck import FusionNeck, GSConv, PyramidFeatures
from .nn import Conv, Module
from .tensor import Tensor, mac_hook, no_grad


@dataclass
class CostReport:
    params: int
    macs: int
    breakdown: dict = field(default_factory=dict)   # module name -> {"params", "macs"}

    @property
    def flops(self):
        return 2 * self.macs

    def as_dict(self):
        return {"params": self.params, "macs": self.macs, "flops": self.flops,
                "breakdown": {k: dict(v) for k, v in sorted(self.breakdown.items())}}


def _group(name, depth):
    return ".".join(name.split(".")[:depth]) if name else "<root>"


def measure_macs(fn, *args, depth=2):
    """Run ``fn(*args)`` without gradients; returns (total MACs, per-module MACs)."""
    per = defaultdict(int)

    def hook(n):
        per[_group(nn.current_scope(), depth)] += n

    with no_grad(), mac_hook(hook):
        fn(*args)
    return int(sum(per.values())), dict(per)


def param_breakdown(model: Module, depth=2):
    per = defaultdict(int)
    for name, p in model.named_parameters():
        per[_group(name.rsplit(".", 1)[0], depth)] += p.size
    return dict(per)


def count_params_flops(model: Detector, input_size=None, depth=2) -> CostReport:
    """Exact parameter count and MACs for one image at ``input_size``."""
    s = input_size or model.cfg.input_size
    x = np.zeros((1, model.cfg.in_channels, s, s))
    was = model.training
    model.eval()
    try:
        total, macs = measure_macs(forward_detect, model, x, depth=depth)
    finally:
        model.train(was)
    params = param_breakdown(model, depth)
    keys = set(params) | set(macs)
    breakdown = {k: {"params": int(params.get(k, 0)), "macs": int(macs.get(k, 0))} for k in keys}
    return CostReport(model.num_parameters(), total, breakdown)


def module_cost(module: Module, x_shape) -> CostReport:
    """Params and MACs of a standalone module applied to a zero tensor of ``x_shape``."""
    module.assign_names()
    x = Tensor(np.zeros(x_shape))
    was = module.training
    module.eval()
    try:
        total, macs = measure_macs(module, x, depth=1)
    finally:
        module.train(was)
    return CostReport(module.num_parameters(), total, {k: {"macs": v} for k, v in macs.items()})


def neck_cost(widths, input_size, slim) -> CostReport:
    """Cost of the fusion neck alone on pyramid features for an ``input_size`` image."""
    c3, c2, c1 = widths
    neck = FusionNeck(widths, slim=slim).assign_names()
    s = input_size
    feats = PyramidFeatures(Tensor(np.zeros((1, c1, s // 32, s // 32))),
                            Tensor(np.zeros((1, c2, s // 16, s // 16))),
                            Tensor(np.zeros((1, c3, s // 8, s // 8))))
    neck.eval()
    total, macs = measure_macs(neck, feats, depth=1)
    return CostReport(neck.num_parameters(), total, {k: {"macs": v} for k, v in macs.items()})


def neck_comparison(cfg: ModelConfig = None):
    """Slim vs plain neck at the config's widths; returns (slim, plain, MAC ratio)."""
    cfg = cfg or ModelConfig()
    slim = neck_cost(cfg.widths[1:], cfg.input_size, True)
    plain = neck_cost(cfg.widths[1:], cfg.input_size, False)
    return slim, plain, slim.macs / plain.macs


def gsconv_comparison(channels, size):
    """GSConv vs a standard 3x3 conv at equal widths; returns (gsconv, standard, MAC ratio)."""
    shape = (1, channels, size, size)
    gs = module_cost(GSConv(channels), shape)
    std = module_cost(Conv(channels, channels, 3, act=False), shape)
    return gs, std, gs.macs / std.macs
