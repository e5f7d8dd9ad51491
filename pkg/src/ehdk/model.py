"""
Detector assembly: backbone, fusion neck and decoupled head.

Four switches pick the ablation row: ``wtcoord`` (wavelet/coordinate
bottleneck inside every C3k2), ``cga`` (cascaded group attention after the
deepest stage), ``slim_neck`` (RepGFPN-Slim instead of the plain PAN) and
``giou_softnms`` (GIoU box loss plus Soft-NMS instead of IoU loss plus hard
NMS; no parameters involved).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import C2PSACGA, C2PSAPlain
from .boxes import Detection, Box, SoftNmsConfig, hard_nms, soft_nms
from .errors import ConfigError, ShapeError
from .neck import FusionNeck, PyramidFeatures
from .nn import Conv, ConvParams, Module, conv2d
from .tensor import Tensor, make_result, no_grad
from .wavelet import C3k2

STRIDES = (8, 16, 32)
BOX_EXP_CLIP = (-8.0, 8.0)


@dataclass
class ModelConfig:
    input_size: int = 256
    widths: tuple = (16, 32, 64, 128)
    cga_groups: int = 2
    wtcoord: bool = True        # A
    cga: bool = True            # B
    slim_neck: bool = True      # C
    giou_softnms: bool = True   # D
    num_classes: int = 2
    head_width: int = 32
    embed_dim: int = 16
    in_channels: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if len(self.widths) != 4:
            raise ConfigError(f"widths needs four entries (stem, stride 8, 16, 32), got {self.widths}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if any(w < 2 or w % 2 for w in self.widths):
            raise ConfigError(f"widths must be even and >= 2, got {self.widths}")
        h = self.cga_groups
        if h < 1:
            raise ConfigError("cga_groups must be >= 1")
        if self.cga and self.widths[3] % h:
            raise ConfigError(f"deepest width {self.widths[3]} is not divisible by cga_groups={h}")
        if self.num_classes < 1 or self.head_width < 1 or self.embed_dim < 1:
            raise ConfigError("num_classes, head_width and embed_dim must be positive")

    def toggles(self):
        return {"A": self.wtcoord, "B": self.cga, "C": self.slim_neck, "D": self.giou_softnms}

    def with_toggles(self, a, b, c, d):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(wtcoord=a, cga=b, slim_neck=c, giou_softnms=d)
        return ModelConfig(**kw)


class Stage(Module):
    def __init__(self, c_in, c_out, wavelet):
        super().__init__()
        self.down = Conv(c_in, c_out, 3, 2)
        self.block = C3k2(c_out, wavelet=wavelet)

    def forward(self, x):
        return self.block(self.down(x))


class Backbone(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w0, w1, w2, w3 = cfg.widths
        self.stem = Conv(cfg.in_channels, w0, 3, 2)
        self.down0 = Conv(w0, w0, 3, 2)
        self.stage3 = Stage(w0, w1, cfg.wtcoord)
        self.stage4 = Stage(w1, w2, cfg.wtcoord)
        self.stage5 = Stage(w2, w3, cfg.wtcoord)
        self.psa = C2PSACGA(w3, cfg.cga_groups) if cfg.cga else C2PSAPlain(w3)

    def forward(self, x) -> PyramidFeatures:
        x = self.down0(self.stem(x))
        p3 = self.stage3(x)
        p2 = self.stage4(p3)
        p1 = self.psa(self.stage5(p2))
        return PyramidFeatures(p1, p2, p3)


class HeadLevel(Module):
    def __init__(self, c, cfg: ModelConfig):
        super().__init__()
        hw = cfg.head_width
        self.reg_stem = Conv(c, hw, 3)
        self.box_pred = ConvParams(hw, 4, 1, weight_init="uniform")
        self.box_pred.bias.init = "zeros"
        self.obj_pred = ConvParams(hw, 1, 1)
        self.obj_pred.bias.init = ("const", -4.6)
        self.cls_stem = Conv(c, hw, 3)
        self.cls_pred = ConvParams(hw, cfg.num_classes, 1)
        self.cls_pred.bias.init = ("const", -2.0)
        self.emb_pred = ConvParams(hw, cfg.embed_dim, 1)

    def forward(self, x):
        r = self.reg_stem(x)
        c = self.cls_stem(x)
        return conv2d(r, self.box_pred), conv2d(r, self.obj_pred), conv2d(c, self.cls_pred), conv2d(c, self.emb_pred)


@dataclass
class ScaleOutput:
    stride: int
    box: Tensor     # (n, 4, h, w) raw tx, ty, tw, th
    obj: Tensor     # (n, 1, h, w) logits
    cls: Tensor     # (n, num_classes, h, w) logits
    emb: Tensor     # (n, embed_dim, h, w)


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.backbone = Backbone(cfg)
        self.neck = FusionNeck(cfg.widths[1:], slim=cfg.slim_neck)
        self.head = [HeadLevel(c, cfg) for c in cfg.widths[1:]]   # strides 8, 16, 32
        self.prototypes = None
        self.reset_parameters(seed)
        self.assign_names()

    def forward(self, images):
        return forward_detect(self, images)


def build_model(cfg: ModelConfig, seed=0) -> Detector:
    cfg.validate()
    return Detector(cfg, seed)


def _as_images(images, cfg):
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim == 3:
        x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    s = cfg.input_size
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (s, s):
        raise ShapeError("images must be (n, channels, input_size, input_size)", x.shape,
                         (x.shape[0] if x.ndim else 0, cfg.in_channels, s, s))
    return x


def forward_detect(model: Detector, images) -> list:
    """Raw per-scale predictions, ordered by stride 8, 16, 32."""
    x = _as_images(images, model.cfg)
    feats = model.neck(model.backbone(x))
    outs = []
    for stride, level, head in zip(STRIDES, feats.levels(), model.head):
        outs.append(ScaleOutput(stride, *head(level)))
    return outs


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return T._sigmoid(np.asarray(x, dtype=np.float64))


def decode_cells(raw, cells, stride):
    """Pixel corners from raw (k, 4) values at (k, 2) (row, col) cells; also returns the Jacobian pieces."""
    raw = np.asarray(raw, dtype=np.float64)
    sxy = _sigmoid(raw[:, :2])
    lo, hi = BOX_EXP_CLIP
    twh = raw[:, 2:]
    ewh = np.exp(np.clip(twh, lo, hi))
    inside = (twh >= lo) & (twh <= hi)
    stride = np.asarray(stride, dtype=np.float64).reshape(-1, 1) * np.ones((len(raw), 1))
    cx = (cells[:, 1] + sxy[:, 0]) * stride[:, 0]
    cy = (cells[:, 0] + sxy[:, 1]) * stride[:, 0]
    w = ewh[:, 0] * stride[:, 0]
    h = ewh[:, 1] * stride[:, 0]
    corners = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    dcenter = sxy * (1 - sxy) * stride          # d(cx, cy)/d(tx, ty)
    dsize = ewh * stride * inside               # d(w, h)/d(tw, th)
    return corners, dcenter, dsize


def decode_op(raw: Tensor, cells, stride) -> Tensor:
    """Differentiable decode of gathered raw box values (k, 4) -> pixel corners (k, 4)."""
    corners, dc, ds = decode_cells(raw.data, cells, stride)

    def backward(g):
        d = np.empty_like(g)
        d[:, 0] = (g[:, 0] + g[:, 2]) * dc[:, 0]
        d[:, 1] = (g[:, 1] + g[:, 3]) * dc[:, 1]
        d[:, 2] = (g[:, 2] - g[:, 0]) * 0.5 * ds[:, 0]
        d[:, 3] = (g[:, 3] - g[:, 1]) * 0.5 * ds[:, 1]
        return (d,)

    return make_result(corners, (raw,), backward, "decode")


def decode_level(out: ScaleOutput):
    """All cells of one level: corners (n, h*w, 4), objectness (n, h*w), class probs (n, h*w, c)."""
    n, _, h, w = out.box.shape
    raw = out.box.data.transpose(0, 2, 3, 1).reshape(-1, 4)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cells = np.tile(np.stack([ii.ravel(), jj.ravel()], axis=1), (n, 1))
    corners, _, _ = decode_cells(raw, cells, out.stride)
    obj = _sigmoid(out.obj.data.reshape(n, h * w))
    cls = _sigmoid(out.cls.data.transpose(0, 2, 3, 1).reshape(n, h * w, -1))
    return corners.reshape(n, h * w, 4), obj, cls


def postprocess(outputs, cfg: ModelConfig, conf=1e-3, pre_nms_topk=300, max_det=100,
                nms_cfg=SoftNmsConfig()):
    """Per-image detections after Soft-NMS (toggle D) or hard NMS, rounded to 6 decimals."""
    levels = [decode_level(o) for o in outputs]
    n = levels[0][0].shape[0]
    size = float(cfg.input_size)
    results = []
    for b in range(n):
        corners = np.concatenate([lv[0][b] for lv in levels])
        obj = np.concatenate([lv[1][b] for lv in levels])
        cls = np.concatenate([lv[2][b] for lv in levels])
        cls_id = np.argmax(cls, axis=1)
        score = obj * cls[np.arange(len(cls)), cls_id]
        keep = np.nonzero(score >= conf)[0]
        keep = keep[np.argsort(-score[keep], kind="stable")][:pre_nms_topk]
        dets = []
        for k in keep:
            x1, y1, x2, y2 = np.round(np.clip(corners[k], 0.0, size), 6)
            dets.append(Detection(Box(x1, y1, x2, y2), int(cls_id[k]), round(float(score[k]), 6)))
        kept = soft_nms(dets, nms_cfg) if cfg.giou_softnms else hard_nms(dets, nms_cfg)
        results.append([Detection(d.box, d.class_id, round(d.score, 6)) for d in kept[:max_det]])
    return results


def predict(model: Detector, images, batch_size=8, **kwargs):
    """Eval-mode detections for a stack of images (values already scaled to [0, 1])."""
    was_training = model.training
    model.eval()
    results = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                outs = forward_detect(model, images[start:start + batch_size])
                results.extend(postprocess(outs, model.cfg, **kwargs))
    finally:
        model.train(was_training)
    return results
