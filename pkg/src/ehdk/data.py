"""
Synthetic ultrasound-like dataset: generation, on-disk I/O and augmentation.

Layout of a dataset directory::

    images/NNNN.pgm     8-bit binary PGM (P5), one per image
    labels/NNNN.txt     one "class cx cy w h" line per object, normalized, 6 decimals
    manifest.txt        one "NNNN train|val|test" line per image, in index order

Classes: 0 = bleed_placenta (dark low-contrast ellipse), 1 = embryo (bright
compact blob).  Every image draws from its own stream ``default_rng([seed, index])``
so generation order (or parallelism) never changes the bytes written.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .boxes import Box
from .errors import ConfigError, ParseError, ValidationError

CLASS_NAMES = ("bleed_placenta", "embryo")
SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    image_size: int = 256
    n_images: int = 112
    seed: int = 0
    min_objects: int = 0
    max_objects: int = 3
    bleed_fraction: float = 0.6           # probability an object is class 0
    contrast_range: tuple = (5.0, 20.0)   # lesion darkening in gray levels
    embryo_contrast_range: tuple = (25.0, 45.0)
    lesion_size_range: tuple = (14.0, 64.0)   # full ellipse axis lengths in pixels
    embryo_size_range: tuple = (10.0, 28.0)
    speckle_strength: float = 0.35
    occluder_prob: float = 0.25

    def validate(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.n_images < 0:
            raise ConfigError("n_images must be non-negative")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise ConfigError(f"contrast range must be positive and ordered, got {self.contrast_range}")
        for name in ("bleed_fraction", "occluder_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.speckle_strength < 0:
            raise ConfigError("speckle_strength must be >= 0")
        for name in ("lesion_size_range", "embryo_size_range"):
            lo, hi = getattr(self, name)
            if not 2 <= lo <= hi < self.image_size:
                raise ConfigError(f"{name} must satisfy 2 <= lo <= hi < image_size")
        return self


@dataclass
class DatasetSample:
    """A grayscale image and its normalized ``(class_id, cx, cy, w, h)`` annotations."""
    image: np.ndarray
    annotations: list = field(default_factory=list)
    name: str = ""
    split: str = ""

    @property
    def size(self):
        return self.image.shape[0]

    def boxes(self):
        """Pixel-space ``(Box, class_id)`` pairs."""
        h, w = self.image.shape
        out = []
        for c, cx, cy, bw, bh in self.annotations:
            out.append((Box((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h), int(c)))
        return out


def validate_annotation(ann, num_classes=2, where=""):
    c, cx, cy, w, h = ann
    if not 0 <= c < num_classes:
        raise ValidationError(f"{where}class_id {c} outside [0, {num_classes})")
    if not (w > 0 and h > 0):
        raise ValidationError(f"{where}box width and height must be positive, got {w}, {h}")
    if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
        raise ValidationError(f"{where}coordinates must lie in [0, 1], got {(cx, cy, w, h)}")
    eps = 1e-6
    if cx - w / 2 < -eps or cx + w / 2 > 1 + eps or cy - h / 2 < -eps or cy + h / 2 > 1 + eps:
        raise ValidationError(f"{where}box extends past the image: {(cx, cy, w, h)}")


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValidationError(f"PGM output needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, 1, "truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(path, 1, f"expected P5 magic, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(path, 1, f"bad PGM header: {exc}") from None
    if maxval != 255:
        raise ParseError(path, 1, f"only 8-bit PGM is supported, maxval={maxval}")
    body = data[pos + 1:]
    if len(body) != w * h:
        raise ParseError(path, 1, f"expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _ellipse_coverage(yy, xx, cy, cx, ay, ax):
    """Anti-aliased coverage in [0, 1] of an axis-aligned ellipse (one-pixel ramp)."""
    r = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    dist = (r - 1.0) * min(ax, ay)
    return np.clip(0.5 - dist, 0.0, 1.0)


def _overlaps(box, placed, limit=0.05):
    for other in placed:
        ix = max(0.0, min(box[2], other[2]) - max(box[0], other[0]))
        iy = max(0.0, min(box[3], other[3]) - max(box[1], other[1]))
        inter = ix * iy
        union = (box[2] - box[0]) * (box[3] - box[1]) + (other[2] - other[0]) * (other[3] - other[1]) - inter
        if inter / union > limit:
            return True
    return False


def synth_image(cfg: SynthConfig, index: int):
    """One image and its annotations, drawn from the stream ``(seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    gx, gy = rng.uniform(-1, 1, size=2)
    base = 110.0 + 30.0 * (gx * (xx / s - 0.5) + gy * (yy / s - 0.5))
    base += 12.0 * np.sin(2 * np.pi * (yy / s) * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed, annotations = [], []
    for _ in range(n_obj):
        cls = 0 if rng.random() < cfg.bleed_fraction else 1
        lo, hi = cfg.lesion_size_range if cls == 0 else cfg.embryo_size_range
        for _attempt in range(50):
            bw, bh = rng.uniform(lo, hi, size=2)
            if cls == 1:
                bh = float(np.clip(bw * rng.uniform(0.8, 1.25), lo, hi))
            cx = rng.uniform(bw / 2 + 1, s - bw / 2 - 1)
            cy = rng.uniform(bh / 2 + 1, s - bh / 2 - 1)
            box = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
            if not _overlaps(box, placed):
                break
        else:
            continue
        placed.append(box)
        cover = _ellipse_coverage(yy, xx, cy, cx, bh / 2, bw / 2)
        if cls == 0:
            base -= rng.uniform(*cfg.contrast_range) * cover
        else:
            # brighter toward the middle of the blob
            r2 = ((xx - cx) / (bw / 2)) ** 2 + ((yy - cy) / (bh / 2)) ** 2
            base += rng.uniform(*cfg.embryo_contrast_range) * cover * (0.6 + 0.4 * np.exp(-r2))
        if rng.random() < cfg.occluder_prob:
            angle = rng.uniform(0, np.pi)
            thick = rng.uniform(2.0, 5.0)
            off = rng.uniform(-0.3, 0.3) * min(bw, bh)
            across = np.abs((xx - cx) * np.sin(angle) - (yy - cy) * np.cos(angle) - off)
            along = np.abs((xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle))
            half_len = rng.uniform(1.0, 2.0) * max(bw, bh)
            band = np.clip(thick / 2 + 0.5 - across, 0.0, 1.0) * np.clip(half_len + 0.5 - along, 0.0, 1.0)
            base += rng.uniform(25.0, 45.0) * band
        ann = (cls, cx / s, cy / s, bw / s, bh / s)
        annotations.append(tuple([cls] + [round(float(v), 6) for v in ann[1:]]))

    u = rng.random((2, s, s))
    speckle = 1.0 + cfg.speckle_strength * (4.0 * u[0] * u[1] - 1.0)
    image = np.clip(np.rint(base * speckle), 0, 255).astype(np.uint8)
    return image, annotations


def split_assignment(n, seed):
    """Seeded 8:1:1 split: val and test get floor(n/10) each, train the rest."""
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    k = n // 10
    split = ["train"] * n
    for i in order[:k]:
        split[i] = "val"
    for i in order[k:2 * k]:
        split[i] = "test"
    return split


def format_label_line(ann):
    c, cx, cy, w, h = ann
    return f"{int(c)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"


def _threads():
    try:
        return max(1, int(os.environ.get("EHDK_THREADS", os.cpu_count() or 1)))
    except ValueError:
        raise ConfigError("EHDK_THREADS must be an integer") from None


def generate_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write images, labels and the manifest under ``out_dir``; returns the directory."""
    cfg.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    def work(i):
        image, anns = synth_image(cfg, i)
        write_pgm(out / "images" / f"{i:04d}.pgm", image)
        text = "".join(format_label_line(a) + "\n" for a in anns)
        (out / "labels" / f"{i:04d}.txt").write_text(text)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        list(pool.map(work, range(cfg.n_images)))
    splits = split_assignment(cfg.n_images, cfg.seed)
    (out / "manifest.txt").write_text("".join(f"{i:04d} {sp}\n" for i, sp in enumerate(splits)))
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def parse_label_file(path, num_classes=2):
    anns = []
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ParseError(path, line_no, f"expected 5 fields 'class cx cy w h', got {len(parts)}")
        try:
            c = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise ParseError(path, line_no, f"non-numeric field in {line!r}") from None
        ann = (c, *[round(v, 6) for v in vals])
        validate_annotation(ann, num_classes, where=f"{path}:{line_no}: ")
        anns.append(ann)
    return anns


def read_manifest(path):
    mapping = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ParseError(path, line_no, f"expected 'NNNN train|val|test', got {line!r}")
        mapping[parts[0]] = parts[1]
    return mapping


def load_dataset(directory, split=None, num_classes=2) -> list:
    """Samples sorted by file name, optionally restricted to one manifest split."""
    root = Path(directory)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"no images/ directory under {root}")
    manifest_path = root / "manifest.txt"
    manifest = read_manifest(manifest_path) if manifest_path.exists() else {}
    if split is not None and split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    samples = []
    for img_path in sorted(img_dir.glob("*.pgm")):
        name = img_path.stem
        sp = manifest.get(name, "")
        if split is not None and sp != split:
            continue
        label_path = lab_dir / f"{name}.txt"
        anns = parse_label_file(label_path, num_classes) if label_path.exists() else []
        samples.append(DatasetSample(read_pgm(img_path), anns, name, sp))
    return samples


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentSwitches:
    flip: bool = True
    brightness: bool = True
    erase: bool = True
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    brightness_max: int = 15


def hflip(sample: DatasetSample) -> DatasetSample:
    anns = [(c, round(1.0 - cx, 6), cy, w, h) for c, cx, cy, w, h in sample.annotations]
    return replace(sample, image=sample.image[:, ::-1].copy(), annotations=anns)


def shift_brightness(sample: DatasetSample, delta: int) -> DatasetSample:
    if delta == 0:
        return replace(sample, image=sample.image.copy())
    img = np.clip(sample.image.astype(np.int16) + int(delta), 0, 255).astype(np.uint8)
    return replace(sample, image=img)


def erase_rectangle(sample: DatasetSample, rng, tries=100, frac=(0.08, 0.25)):
    """Pick a half-open rectangle (y0, x0, y1, x1) containing no GT center, or None."""
    h, w = sample.image.shape
    centers = [(cy * h, cx * w) for _, cx, cy, _, _ in sample.annotations]
    for _ in range(tries):
        eh = int(rng.integers(max(1, int(frac[0] * h)), max(2, int(frac[1] * h)) + 1))
        ew = int(rng.integers(max(1, int(frac[0] * w)), max(2, int(frac[1] * w)) + 1))
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        rect = (y0, x0, y0 + eh, x0 + ew)
        if not any(y0 <= cy < y0 + eh and x0 <= cx < x0 + ew for cy, cx in centers):
            return rect
    return None


def random_erase(sample: DatasetSample, rng):
    rect = erase_rectangle(sample, rng)
    if rect is None:
        return sample, None
    y0, x0, y1, x1 = rect
    img = sample.image.copy()
    img[y0:y1, x0:x1] = int(rng.integers(0, 256))
    return replace(sample, image=img), rect


def augment(sample: DatasetSample, switches: AugmentSwitches, rng) -> DatasetSample:
    """Random flip, brightness shift and erase, each drawn from ``rng`` in that order."""
    out = sample
    if switches.flip and rng.random() < switches.flip_prob:
        out = hflip(out)
    if switches.brightness:
        m = switches.brightness_max
        out = shift_brightness(out, int(rng.integers(-m, m + 1)))
    if switches.erase and rng.random() < switches.erase_prob:
        out, _ = random_erase(out, rng)
    return out
