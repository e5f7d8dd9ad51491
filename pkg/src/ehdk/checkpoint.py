"""
Versioned binary checkpoint.

All integers are little-endian; all arrays are little-endian float64.

    offset  size  field
    0       4     magic b"EHDK"
    4       4     u32 format version (1)
    8       1     u8 deployed flag (1 when every RepConv is fused)
    9       1     u8 prototype-bank flag
    10      2     u16 reserved, zero
    12      8     u64 seed the parameters were initialized and trained with
    20      4     u32 L, byte length of the model config text
    24      L     UTF-8 model config ("model.key = value" lines)
    ..      4     u32 CRC-32 of the newline-joined parameter names
    ..      8     u64 P, number of parameter values
    ..      8P    parameters, flattened in declaration order
    ..      8     u64 B, number of BN statistic values
    ..      8B    running_mean then running_var of each BN, declaration order
    ..      8     u32 K classes, u32 D embedding dim (only if bank flag)
    ..      8K    u64 per-class support counts          (only if bank flag)
    ..      8KD   prototype matrix, row-major            (only if bank flag)
    ..      4     u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .config import model_config_from_text, model_config_text
from .errors import ValidationError
from .loss import PrototypeBank
from .model import Detector, build_model
from .neck import RepConv, fuse_all

MAGIC = b"EHDK"
VERSION = 1


def _is_deployed(model):
    reps = [m for _, m in model.named_modules() if isinstance(m, RepConv)]
    return bool(reps) and all(m.deployed for m in reps)


def _names_crc(model):
    return zlib.crc32("\n".join(n for n, _ in model.named_parameters()).encode())


def _f64(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_bytes(model: Detector) -> bytes:
    bank = model.prototypes
    cfg_text = model_config_text(model.cfg).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IBBHQ", VERSION, int(_is_deployed(model)), int(bank is not None), 0, int(model.seed))
    out += struct.pack("<I", len(cfg_text)) + cfg_text
    params = [p.data.ravel() for p in model.parameters()]
    flat = np.concatenate(params) if params else np.zeros(0)
    out += struct.pack("<IQ", _names_crc(model), flat.size) + _f64(flat)
    stats = [mod.buffer(key).ravel() for _, mod, key in model.named_buffers()]
    bn = np.concatenate(stats) if stats else np.zeros(0)
    out += struct.pack("<Q", bn.size) + _f64(bn)
    if bank is not None:
        out += struct.pack("<II", bank.num_classes, bank.dim)
        out += np.ascontiguousarray(bank.counts, dtype="<u8").tobytes()
        out += _f64(bank.prototypes)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(model: Detector, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, data, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValidationError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count, dtype="<f8"):
        return np.frombuffer(self.take(count * 8), dtype=dtype).astype(np.float64 if dtype == "<f8" else np.int64)


def checkpoint_from_bytes(data: bytes, source="<bytes>") -> Detector:
    if len(data) < 28 or data[:4] != MAGIC:
        raise ValidationError(f"{source}: not an EHDK checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ValidationError(f"{source}: checksum mismatch")
    r = _Reader(data[:-4], source)
    r.take(4)
    version, deployed, has_bank, _, seed = r.unpack("<IBBHQ")
    if version != VERSION:
        raise ValidationError(f"{source}: unsupported checkpoint version {version}")
    (n_cfg,) = r.unpack("<I")
    cfg = model_config_from_text(r.take(n_cfg).decode("utf-8"))
    model = build_model(cfg, seed)
    if deployed:
        fuse_all(model)
        model.assign_names()
    names_crc, n_params = r.unpack("<IQ")
    if names_crc != _names_crc(model):
        raise ValidationError(f"{source}: parameter layout does not match the stored config")
    flat = r.array(n_params)
    params = model.parameters()
    if n_params != sum(p.size for p in params):
        raise ValidationError(f"{source}: expected {sum(p.size for p in params)} parameters, found {n_params}")
    pos = 0
    for p in params:
        p.data = flat[pos:pos + p.size].reshape(p.shape).copy()
        pos += p.size
    (n_bn,) = r.unpack("<Q")
    bn = r.array(n_bn)
    buffers = list(model.named_buffers())
    if n_bn != sum(mod.buffer(key).size for _, mod, key in buffers):
        raise ValidationError(f"{source}: BN statistics size mismatch")
    pos = 0
    for _, mod, key in buffers:
        size = mod.buffer(key).size
        mod.set_buffer(key, bn[pos:pos + size].copy())
        pos += size
    if has_bank:
        k, d = r.unpack("<II")
        bank = PrototypeBank(k, d)
        bank.counts = r.array(k, "<u8")
        bank.prototypes = r.array(k * d).reshape(k, d)
        model.prototypes = bank
    if r.pos != len(r.data):
        raise ValidationError(f"{source}: {len(r.data) - r.pos} trailing bytes")
    model.eval()
    return model


def load_checkpoint(path) -> Detector:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), str(path))
