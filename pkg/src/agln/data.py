"""Synthetic "shapes world" corpus, PNM image/mask IO and augmentation.

Images are binary PPM (P6), masks binary PGM (P5) whose pixel value is the
class id, 255 marking ignored pixels. A manifest lists one sample per line:
``<id>\\t<split>\\t<image_path>\\t<mask_path>`` with paths relative to it.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import IGNORE_INDEX, ConfigurationError, DataError, resize_array

SHAPE_KINDS = ("disc", "rectangle", "triangle", "stripe")
SUPERSAMPLE = 2


class PnmError(ValueError):
    pass


# --- PNM ---------------------------------------------------------------------


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``rgb`` is (H, W, 3) uint8."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def parse_pnm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode 8-bit P5/P6 data into (H, W) or (H, W, 3) uint8."""
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{source}: parse error at offset 0: bad magic {magic!r}, expected P5 or P6")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PnmError(f"{source}: parse error at offset {start}: expected a header integer")
        tokens.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PnmError(f"{source}: parse error at offset {pos}: missing whitespace after header")
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise PnmError(f"{source}: parse error: only 8-bit maxval 255 is supported, got {maxval}")
    depth = 3 if magic == b"P6" else 1
    need = w * h * depth
    body = raw[pos:pos + need]
    if len(body) != need:
        raise PnmError(f"{source}: parse error at offset {pos}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if depth == 3 else arr.reshape(h, w)


def read_pnm(path: str | Path) -> np.ndarray:
    return parse_pnm(Path(path).read_bytes(), str(path)).copy()


# --- samples -----------------------------------------------------------------


@dataclass
class SegSample:
    """``image`` is (3, H, W) float in [0, 1]; ``mask`` is (H, W) uint8 class ids."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"sample {self.id!r}: image {self.image.shape[1:]} vs mask {self.mask.shape}")


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.transpose(image, (1, 2, 0)) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_sample(image_path: str | Path, mask_path: str | Path, num_classes: int | None = None,
                sample_id: str = "") -> SegSample:
    rgb = read_pnm(image_path)
    mask = read_pnm(mask_path)
    if rgb.ndim != 3 or mask.ndim != 2:
        raise DataError(f"{image_path}: expected a P6 image and a P5 mask")
    if rgb.shape[:2] != mask.shape:
        raise DataError(f"{image_path}: image {rgb.shape[:2]} and mask {mask.shape} differ in size")
    if num_classes is not None:
        bad = (mask >= num_classes) & (mask != IGNORE_INDEX)
        if bad.any():
            raise DataError(f"{mask_path}: mask value {int(mask[bad][0])} >= num_classes {num_classes}")
    image = np.transpose(rgb, (2, 0, 1)).astype(np.float32) / np.float32(255.0)
    return SegSample(image, mask, sample_id or Path(image_path).stem)


def save_sample(sample: SegSample, image_path: str | Path, mask_path: str | Path) -> None:
    write_ppm(image_path, image_to_bytes(sample.image))
    write_pgm(mask_path, sample.mask)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    image_path: Path
    mask_path: Path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        sid, split, img, msk = parts
        entries.append(ManifestEntry(sid, split, root / img, root / msk))
    return entries


def load_split(manifest: str | Path, split: str | None, num_classes: int | None = None) -> list[SegSample]:
    return [load_sample(e.image_path, e.mask_path, num_classes, e.id)
            for e in read_manifest(manifest) if split is None or e.split == split]


# --- corpus generation -------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    num_train: int = 200
    num_val: int = 50
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 5
    clutter_level: float = 0.7

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > 255:
            raise ConfigurationError("num_classes must be < 255 (255 is the ignore label)")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ConfigurationError(f"clutter_level must lie in [0, 1], got {self.clutter_level}")
        if min(self.image_size) < 1 or self.num_train < 0 or self.num_val < 0:
            raise ConfigurationError("image_size must be positive and split sizes non-negative")


def class_color(k: int, num_classes: int) -> np.ndarray:
    hue = (k - 1) / (num_classes - 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(max(2, h // cell), max(2, w // cell)))
    return resize_array(coarse, h, w)


def _background(rng, h, w, clutter):
    base = rng.uniform(0.35, 0.65, size=3)
    texture = np.zeros((h, w))
    if clutter > 0:
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        freq = rng.uniform(6.0, 14.0)
        angle = rng.uniform(0.0, np.pi)
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + rng.uniform(0, 2 * np.pi))
        texture = 0.45 * _smooth_noise(rng, h, w, 8) + 0.3 * grating + 0.25 * rng.uniform(-1, 1, size=(h, w))
    tint = rng.uniform(-1.0, 1.0, size=3)
    img = base[:, None, None] + clutter * 0.3 * texture[None] * (0.6 + 0.4 * tint[:, None, None])
    return img


def _shape_mask(rng, kind, ys, xs, size):
    h, w = size
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    r = rng.uniform(0.12, 0.26) * min(h, w)
    if kind == "disc":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if kind == "rectangle":
        hh, hw = r * rng.uniform(0.6, 1.2), r * rng.uniform(0.6, 1.2)
        return (np.abs(ys - cy) <= hh) & (np.abs(xs - cx) <= hw)
    if kind == "triangle":
        start = rng.uniform(0, 2 * np.pi)
        ang = start + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, size=3)
        vy, vx = cy + 1.2 * r * np.sin(ang), cx + 1.2 * r * np.cos(ang)
        signs = []
        for i in range(3):
            j = (i + 1) % 3
            signs.append((vx[j] - vx[i]) * (ys - vy[i]) - (vy[j] - vy[i]) * (xs - vx[i]))
        s = np.stack(signs)
        return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)
    angle = rng.uniform(0, np.pi)
    half = rng.uniform(0.05, 0.09) * min(h, w)
    dist = (ys - cy) * np.cos(angle) - (xs - cx) * np.sin(angle)
    return np.abs(dist) <= half


def _majority(labels: np.ndarray) -> np.ndarray:
    """Per-pixel mode over the leading axis; ties go to the earliest subsample."""
    counts = (labels[:, None] == labels[None, :]).sum(axis=1)
    pick = np.argmax(counts, axis=0)
    return np.take_along_axis(labels, pick[None], axis=0)[0]


def render_sample(spec: CorpusSpec, index: int) -> SegSample:
    """Draw one image/mask pair; depends only on (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    sh, sw = h * SUPERSAMPLE, w * SUPERSAMPLE
    ys, xs = np.mgrid[0:sh, 0:sw]
    ys = (ys + 0.5) / SUPERSAMPLE
    xs = (xs + 0.5) / SUPERSAMPLE

    img = resize_array(_background(rng, h, w, spec.clutter_level), sh, sw)
    labels = np.zeros((sh, sw), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 6))):
        k = int(rng.integers(1, spec.num_classes))
        kind = SHAPE_KINDS[(k - 1) % len(SHAPE_KINDS)]
        inside = _shape_mask(rng, kind, ys, xs, (h, w))
        rgb = class_color(k, spec.num_classes)
        hsv = np.array(colorsys.rgb_to_hsv(*rgb))
        hsv += [rng.uniform(-0.03, 0.03), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)]
        color = np.array(colorsys.hsv_to_rgb(hsv[0] % 1.0, *np.clip(hsv[1:], 0, 1)))
        img[:, inside] = color[:, None]
        labels[inside] = k

    img = img.reshape(3, h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(2, 4))
    blocks = labels.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE).transpose(1, 3, 0, 2).reshape(-1, h, w)
    mask = _majority(blocks).astype(np.uint8)
    rgb8 = image_to_bytes(np.clip(img, 0.0, 1.0))
    image = np.transpose(rgb8, (2, 0, 1)).astype(np.float32) / np.float32(255.0)
    return SegSample(image, mask, f"s{index:05d}")


def generate_corpus(spec: CorpusSpec, out_dir: str | Path) -> Path:
    """Render the corpus to ``out_dir`` and return the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for index in range(spec.num_train + spec.num_val):
        split = "train" if index < spec.num_train else "val"
        sample = render_sample(spec, index)
        img_rel, mask_rel = f"images/{sample.id}.ppm", f"masks/{sample.id}.pgm"
        save_sample(sample, out_dir / img_rel, out_dir / mask_rel)
        lines.append(f"{sample.id}\t{split}\t{img_rel}\t{mask_rel}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return manifest


# --- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    flip: bool = True
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop: tuple[int, int] | None = None


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[ri[:, None], ci[None, :]]


def hflip(sample: SegSample) -> SegSample:
    return SegSample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.id)


def augment(sample: SegSample, rng: np.random.Generator, policy: AugmentPolicy) -> SegSample:
    """Random scale, crop (padding with mean color / ignore label) and flip."""
    lo, hi = policy.scale_range
    if hi < lo or lo <= 0:
        raise ConfigurationError(f"invalid scale_range {policy.scale_range}")
    h, w = sample.mask.shape
    ch, cw = policy.crop or (h, w)
    s = rng.uniform(lo, hi)
    sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    image = resize_array(sample.image, sh, sw)
    mask = nearest_resize(sample.mask, sh, sw)
    if sh < ch or sw < cw:
        ph, pw = max(ch, sh), max(cw, sw)
        fill = image.reshape(3, -1).mean(axis=1)
        padded = np.broadcast_to(fill[:, None, None], (3, ph, pw)).astype(image.dtype)
        padded[:, :sh, :sw] = image
        pmask = np.full((ph, pw), IGNORE_INDEX, dtype=mask.dtype)
        pmask[:sh, :sw] = mask
        image, mask, sh, sw = padded, pmask, ph, pw
    top = int(rng.integers(0, sh - ch + 1))
    left = int(rng.integers(0, sw - cw + 1))
    out = SegSample(image[:, top:top + ch, left:left + cw].copy(), mask[top:top + ch, left:left + cw].copy(),
                    sample.id)
    if policy.flip and rng.random() < 0.5:
        out = hflip(out)
    return out
