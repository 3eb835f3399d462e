"""Image I/O, augmentation and a synthetic textured corpus."""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, ParseError, UnsupportedFormatError

log = logging.getLogger(__name__)


@dataclass
class ImageSample:
    pixels: np.ndarray           # (H, W, 3) in [0, 1]
    label: int | None = None
    path: str | None = None


# --------------------------------------------------------------------------
# PPM (binary P6, maxval 255)

_WS = b" \t\r\n\x0b\x0c"


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos] in _WS:
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError(f"unexpected end of PPM header at byte {pos}")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise ParseError(f"bad PPM magic {magic!r} at byte 0")
    fields = []
    for name in ("width", "height", "maxval"):
        at = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad PPM {name} {tok!r} near byte {at}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"PPM maxval {maxval} unsupported (only 255)")
    if width <= 0 or height <= 0:
        raise ParseError(f"PPM dimensions {width}x{height} invalid near byte {pos}")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise ParseError(f"missing whitespace after PPM header at byte {pos}")
    pos += 1
    need = width * height * 3
    body = buf[pos:pos + need]
    if len(body) < need:
        raise ParseError(f"truncated PPM body: {len(body)} of {need} bytes after byte {pos}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    arr = to_bytes(pixels)
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected (H, W, 3) pixels, got {arr.shape}")
    return arr


def load_ppm(path, label: int | None = None) -> ImageSample:
    data = Path(path).read_bytes()
    return ImageSample(decode_ppm(data).astype(np.float64) / 255.0, label, str(path))


def save_ppm(sample, path) -> None:
    pixels = sample.pixels if isinstance(sample, ImageSample) else sample
    Path(path).write_bytes(encode_ppm(pixels))


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory and on-disk corpora agree."""
    return to_bytes(pixels).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# corpus manifest: ``path<TAB>label`` per line

def write_index(entries, path) -> None:
    with open(path, "w") as fh:
        for p, label in entries:
            fh.write(f"{p}\t{'' if label is None else label}\n")


def read_index(path) -> list[tuple[str, int | None]]:
    root = Path(path).parent
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'path<TAB>label'")
            p = Path(parts[0])
            if not p.is_absolute():
                p = root / p
            out.append((str(p), int(parts[1]) if parts[1] else None))
    return out


def load_corpus(path) -> list[ImageSample]:
    """Load a corpus from its index file or the directory holding ``index.tsv``."""
    path = Path(path)
    if path.is_dir():
        path = path / "index.tsv"
    if not path.exists():
        raise DataError(f"corpus index {path} not found")
    return [load_ppm(p, label) for p, label in read_index(path)]


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SyntheticCorpusSpec:
    classes: int = 4
    samples_per_class: int = 64
    resolution: int = 64
    seed: int = 0
    # per class: dominant orientation (radians) and spatial frequency band
    # (cycles per image); classes cycle through these lists. Orientations
    # survive horizontal flips and the bands stay apart under a 0.4-area crop.
    orientations: tuple[float, ...] = (0.0, math.pi / 2, 0.0, math.pi / 2)
    frequency_bands: tuple[tuple[float, float], ...] = ((2.0, 3.5), (2.0, 3.5), (7.0, 10.0), (7.0, 10.0))
    orientation_jitter: float = 0.25
    blob_scale: float = 0.35      # fraction of the image covered by a contrasting patch region
    palette_spread: float = 0.15  # radians of chroma-axis jitter
    chroma: float = 0.05
    grey_jitter: float = 0.0
    blob_tone: tuple[float, float] = (0.5, 0.5)


def _chroma_axis(angle: float) -> np.ndarray:
    # unit vector in the plane orthogonal to grey (1, 1, 1)
    e1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
    e2 = np.array([1.0, 1.0, -2.0]) / math.sqrt(6.0)
    return math.cos(angle) * e1 + math.sin(angle) * e2


def _class_palette(c: int, spec: SyntheticCorpusSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # complementary pair around a shared grey: the mean colour carries no class
    # information, the axis the two colours span does
    angle = math.pi * (c % spec.classes) / spec.classes + rng.normal(0, spec.palette_spread)
    axis = _chroma_axis(angle) * spec.chroma * rng.uniform(0.8, 1.2)
    grey = 0.5 + rng.normal(0, spec.grey_jitter)
    a = np.clip(grey + axis, 0.0, 1.0)
    b = np.clip(grey - axis, 0.0, 1.0)
    return a, b


def _texture(res: int, theta: float, band: tuple[float, float], rng: np.random.Generator,
             jitter: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] / res
    field_ = np.zeros((res, res))
    for _ in range(3):
        t = theta + rng.normal(0, jitter)
        f = rng.uniform(*band)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += np.cos(2 * math.pi * f * (xx * math.cos(t) + yy * math.sin(t)) + phase)
    return 0.5 + 0.5 * np.tanh(field_)


def synth_image(label: int, spec: SyntheticCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    res = spec.resolution
    theta = spec.orientations[label % len(spec.orientations)]
    band = spec.frequency_bands[label % len(spec.frequency_bands)]
    tex = _texture(res, theta, band, rng, spec.orientation_jitter)
    a, b = _class_palette(label, spec, rng)
    img = a * (1 - tex[..., None]) + b * tex[..., None]
    # a smooth contrasting region (field, water body) in a random place
    yy, xx = np.mgrid[0:res, 0:res] / res
    cy, cx = rng.uniform(0.2, 0.8, 2)
    r = spec.blob_scale * rng.uniform(0.6, 1.2)
    blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r)) ** 2)[..., None]
    tone = np.full(3, rng.uniform(*spec.blob_tone))
    img = img * (1 - 0.6 * blob) + 0.6 * blob * tone
    img += rng.normal(0, 0.02, img.shape)
    return quantize(np.clip(img, 0.0, 1.0))


def synth_corpus(spec: SyntheticCorpusSpec) -> list[ImageSample]:
    """Class-balanced corpus; sample j of class c uses seed (spec.seed, c, j)."""
    if spec.classes < 1 or spec.samples_per_class < 1:
        raise ParameterError("corpus needs at least one class and one sample per class")
    out = []
    for c in range(spec.classes):
        for j in range(spec.samples_per_class):
            rng = np.random.default_rng([spec.seed, c, j])
            out.append(ImageSample(synth_image(c, spec, rng), c))
    return out


def write_corpus(samples, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for n, s in enumerate(samples):
        name = f"img_{n:05d}_c{s.label if s.label is not None else 'x'}.ppm"
        save_ppm(s, out_dir / name)
        entries.append((name, s.label))
    index = out_dir / "index.tsv"
    write_index(entries, index)
    return index


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugConfig:
    output_size: int = 64
    crop_scale: tuple[float, float] = (0.4, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    enable_crop: bool = True
    enable_flip: bool = True
    enable_jitter: bool = True
    enable_blur: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ParameterError(f"crop scale range {self.crop_scale} invalid")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ParameterError(f"crop ratio range {self.crop_ratio} invalid")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ParameterError(f"blur sigma range {self.blur_sigma} invalid")
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must be a probability")

    @classmethod
    def disabled(cls, output_size: int = 64) -> AugConfig:
        return cls(output_size=output_size, enable_crop=False, enable_flip=False,
                   enable_jitter=False, enable_blur=False)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = img.shape
    if h == size and w == size:
        return img.copy()
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0, 1)[:, None, None]
    wx = np.clip(xs - x0, 0, 1)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_box(h: int, w: int, cfg: AugConfig, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random resized-crop box (top, left, height, width)."""
    area = h * w
    log_r = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def color_jitter(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    order = rng.permutation(3)
    for op in order:
        if op == 0:
            img = np.clip(img * b, 0, 1)
        elif op == 1:
            img = np.clip((img - _gray(img).mean()) * c + _gray(img).mean(), 0, 1)
        else:
            g = _gray(img)[..., None]
            img = np.clip((img - g) * s + g, 0, 1)
    return img


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (x / sigma) ** 2)
    kern /= kern.sum()
    pad = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    img = sum(kern[i] * pad[i:i + img.shape[0]] for i in range(kern.size))
    pad = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    return sum(kern[i] * pad[:, i:i + img.shape[1]] for i in range(kern.size))


def augment(sample, cfg: AugConfig, rng: np.random.Generator) -> ImageSample:
    """Random resized crop, flip, colour jitter and blur; output clamped to [0, 1]."""
    img = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.float64)
    label = sample.label if isinstance(sample, ImageSample) else None
    h, w, _ = img.shape
    if cfg.enable_crop:
        top, left, ch, cw = crop_box(h, w, cfg, rng)
        img = img[top:top + ch, left:left + cw]
    img = resize_bilinear(img, cfg.output_size)
    if cfg.enable_flip and rng.uniform() < cfg.flip_prob:
        img = flip(img)
    if cfg.enable_jitter and rng.uniform() < cfg.jitter_prob:
        img = color_jitter(img, cfg, rng)
    if cfg.enable_blur and rng.uniform() < cfg.blur_prob:
        img = gaussian_blur(img, rng.uniform(*cfg.blur_sigma))
    return ImageSample(np.clip(img, 0.0, 1.0), label)


def thread_cap() -> int | None:
    value = os.environ.get("PIEVIT_THREADS")
    if not value:
        return None
    if not re.fullmatch(r"\d+", value) or int(value) < 1:
        raise ParameterError(f"PIEVIT_THREADS must be a positive integer, got {value!r}")
    return int(value)
