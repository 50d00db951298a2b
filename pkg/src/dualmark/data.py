"""Images, payloads, masks and the tamper-composition operator.

Every module boundary exchanges images as float32 ``H x W x 3`` arrays in [0, 1]
(numpy) or ``N x 3 x H x W`` tensors (torch).  Helpers here convert between the two.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

ASSET_DIR = Path(__file__).parent / "assets"
WATERMARK_ASSET = ASSET_DIR / "sky.png"
MULTIPLE = 16


# --------------------------------------------------------------------------- images

def center_crop_multiple(img: np.ndarray, multiple: int = MULTIPLE) -> np.ndarray:
    h, w = img.shape[:2]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} is smaller than {multiple}x{multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[top:top + nh, left:left + nw]


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.size == 0:
        raise ValueError(f"{path}: zero-area image")
    return center_crop_multiple(arr.astype(np.float32) / 255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes, clamping first; round half away from zero."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    Image.fromarray(quantize(img), mode="RGB").save(Path(path), format="PNG")


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    """Binarised single-channel 0/255 PNG."""
    m = (np.asarray(mask) >= 0.5).astype(np.uint8) * 255
    Image.fromarray(m, mode="L").save(Path(path), format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.float32)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """HxWxC (or HxW) numpy -> 1xCxHxW float32 tensor."""
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]


def to_numpy(t: torch.Tensor) -> np.ndarray:
    """1xCxHxW (or CxHxW) tensor -> HxWxC numpy; single channel squeezed."""
    t = t.detach().cpu()
    if t.dim() == 4:
        t = t[0]
    a = t.numpy().transpose(1, 2, 0)
    return a[..., 0] if a.shape[2] == 1 else a


# --------------------------------------------------------------------------- payloads

def random_payload(length: int = 100, seed: int | None = None) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=length).astype(np.uint8)


def bits_to_hex(bits: Sequence[int]) -> str:
    bits = np.asarray(bits).astype(np.uint8).ravel()
    if np.any(bits > 1):
        raise ValueError("payload must be binary")
    pad = (-len(bits)) % 4
    padded = np.concatenate([bits, np.zeros(pad, np.uint8)])
    nibbles = padded.reshape(-1, 4) @ np.array([8, 4, 2, 1])
    return "".join(f"{n:x}" for n in nibbles)


def hex_to_bits(text: str, length: int = 100) -> np.ndarray:
    text = text.strip().lower()
    if not re.fullmatch(r"[0-9a-f]*", text):
        raise ValueError(f"payload {text!r} is not hexadecimal")
    if len(text) != math.ceil(length / 4):
        raise ValueError(f"payload has {len(text)} nibbles, expected {math.ceil(length / 4)} for {length} bits")
    bits = [(int(c, 16) >> s) & 1 for c in text for s in (3, 2, 1, 0)]
    return np.array(bits[:length], dtype=np.uint8)


def round_soft_bits(soft: np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(soft, torch.Tensor):
        soft = soft.detach().cpu().numpy()
    return (np.asarray(soft) >= 0.5).astype(np.uint8)


# --------------------------------------------------------------------------- masks

SHAPES = ("rect", "ellipse", "stroke")


@dataclass
class MaskSpec:
    coverage: tuple = (0.05, 0.35)
    shapes: tuple = SHAPES

    def __post_init__(self):
        lo, hi = self.coverage
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"invalid coverage range {self.coverage}")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown mask shapes {sorted(bad)}")


def _rect(h, w, area, rng):
    aspect = math.exp(rng.uniform(-0.8, 0.8))
    rh = int(np.clip(round(math.sqrt(area * aspect)), 1, h))
    rw = int(np.clip(round(area / max(rh, 1)), 1, w))
    top = rng.integers(0, h - rh + 1)
    left = rng.integers(0, w - rw + 1)
    m = np.zeros((h, w), bool)
    m[top:top + rh, left:left + rw] = True
    return m


def _ellipse(h, w, area, rng):
    aspect = math.exp(rng.uniform(-0.7, 0.7))
    a = max(math.sqrt(area * aspect / math.pi), 0.5)
    b = max(area / (math.pi * a), 0.5)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / a) ** 2 + ((xx + 0.5 - cx) / b) ** 2 <= 1.0


def _stroke(h, w, area, rng):
    m = np.zeros((h, w), bool)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    radius = rng.uniform(0.03, 0.08) * min(h, w) + 0.5
    p = np.array([rng.uniform(0, h), rng.uniform(0, w)])
    angle = rng.uniform(0, 2 * math.pi)
    for _ in range(64):
        if m.sum() >= area:
            break
        angle += rng.normal(0, 0.8)
        length = rng.uniform(0.1, 0.3) * min(h, w)
        q = p + length * np.array([math.sin(angle), math.cos(angle)])
        q = np.clip(q, 0, [h, w])
        d = q - p
        t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
        dist2 = (yy - p[0] - t * d[0]) ** 2 + (xx - p[1] - t * d[1]) ** 2
        m |= dist2 <= radius ** 2
        p = q
    return m


def _adjust(m: np.ndarray, lo_px: int, hi_px: int) -> np.ndarray:
    """Grow or shrink a mask along its boundary until its pixel count is in range."""
    m = m.copy()
    while m.sum() < lo_px:
        ring = ndimage.binary_dilation(m) & ~m
        if not ring.any():
            ring = ~m
        need = lo_px - int(m.sum())
        idx = np.flatnonzero(ring)
        m.flat[idx[:need]] = True
    while m.sum() > hi_px:
        ring = m & ~ndimage.binary_erosion(m, border_value=1)
        if not ring.any():
            ring = m
        extra = int(m.sum()) - hi_px
        idx = np.flatnonzero(ring)
        m.flat[idx[-extra:]] = False
    return m


def generate_random_mask(height: int, width: int, spec: MaskSpec | None = None,
                         seed: int = 0) -> np.ndarray:
    """Binary float32 mask whose covered fraction lies in ``spec.coverage``."""
    spec = spec or MaskSpec()
    lo, hi = spec.coverage
    n = height * width
    lo_px, hi_px = math.ceil(lo * n - 1e-9), math.floor(hi * n + 1e-9)
    if lo_px > hi_px:
        raise ValueError(f"coverage range {spec.coverage} holds no pixel count for {height}x{width}")
    rng = np.random.default_rng(seed)
    target = rng.uniform(lo, hi) * n
    shape = spec.shapes[rng.integers(len(spec.shapes))]
    if target <= 0:
        m = np.zeros((height, width), bool)
    else:
        draw = {"rect": _rect, "ellipse": _ellipse, "stroke": _stroke}[shape]
        m = draw(height, width, target, rng)
    return _adjust(m, lo_px, hi_px).astype(np.float32)


def is_binary(mask) -> bool:
    a = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    return bool(np.all((a == 0) | (a == 1)))


# --------------------------------------------------------------------------- attack spec

@dataclass
class AttackSpec:
    kind: str = "identity"
    params: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "AttackSpec":
        """``"jpeg:q=70"`` or ``"gaussian_noise:sigma=10,seed=3"``."""
        kind, _, rest = text.strip().partition(":")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"malformed attack parameter {item!r}")
            try:
                params[key] = int(value)
            except ValueError:
                try:
                    params[key] = float(value)
                except ValueError:
                    params[key] = value
        seed = int(params.pop("seed", seed))
        return cls(kind, params, seed)

    def __str__(self) -> str:
        args = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}:{args}" if args else self.kind


# --------------------------------------------------------------------------- composition

def compose_tamper(container, edited, mask, degrade: Optional[AttackSpec] = None, bank=None):
    """``D(container * (1 - M) + edited * M)`` for a binary ground-truth mask.

    Accepts numpy HxWx3 images with an HxW mask, or NCHW tensors with an Nx1xHxW mask;
    returns the same kind.  Gradients flow to both images.
    """
    from .attacks import apply_degradation

    as_numpy = isinstance(container, np.ndarray)
    c = to_tensor(container) if as_numpy else container
    e = to_tensor(edited) if isinstance(edited, np.ndarray) else edited
    m = to_tensor(mask) if isinstance(mask, np.ndarray) else mask
    if m.dim() == 3:
        m = m[:, None]
    if c.shape != e.shape or c.shape[-2:] != m.shape[-2:] or m.shape[0] not in (1, c.shape[0]):
        raise ValueError(f"shape mismatch: container {tuple(c.shape)}, edited {tuple(e.shape)}, mask {tuple(m.shape)}")
    if not is_binary(m):
        raise ValueError("tamper mask must be binary")
    m = m.to(c.dtype)
    out = c * (1 - m) + e * m
    if degrade is not None:
        out = apply_degradation(out, degrade, bank=bank)
    return to_numpy(out) if as_numpy else out


# --------------------------------------------------------------------------- assets & corpus

def make_sky(size: int = 256, seed: int = 2024, top=(0.42, 0.63, 0.90), bottom=(0.74, 0.86, 0.98),
             cloud=0.45) -> np.ndarray:
    """Procedural light-toned sky with soft clouds; the defaults build the shipped asset."""
    rng = np.random.default_rng(seed)
    y = np.linspace(0, 1, size)[:, None]
    top, bottom = np.asarray(top), np.asarray(bottom)
    sky = top + (bottom - top) * y[..., None]
    sky = np.broadcast_to(sky, (size, size, 3)).copy()
    clouds = np.zeros((size, size))
    for octave in range(5):
        cells = 3 * 2 ** octave
        grid = rng.random((cells + 1, cells + 1))
        layer = ndimage.zoom(grid, size / cells, order=3)[:size, :size]
        clouds += layer * 0.5 ** octave
    clouds = (clouds - clouds.min()) / (clouds.max() - clouds.min())
    cover = np.clip((clouds - cloud) / 0.35, 0, 1) ** 1.5
    sky = sky * (1 - cover[..., None]) + np.array([0.97, 0.97, 0.98]) * cover[..., None]
    return np.clip(sky, 0, 1).astype(np.float32)


def random_skies(count: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Randomised light-toned sky variants (colours, cloud cover, layout)."""
    rng = np.random.default_rng(seed)
    out = np.empty((count, size, size, 3), np.float32)
    for i in range(count):
        top = np.clip(np.array([0.42, 0.63, 0.90]) + rng.normal(0, 0.12, 3), 0.2, 1.0)
        bottom = np.clip(np.array([0.74, 0.86, 0.98]) + rng.normal(0, 0.08, 3), 0.4, 1.0)
        sky = make_sky(size, int(rng.integers(2 ** 31)), top, bottom, rng.uniform(0.25, 0.65))
        out[i] = sky[::-1] if rng.random() < 0.5 else sky
    return out


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    pil = Image.fromarray(quantize(img))
    return np.asarray(pil.resize((width, height), Image.BICUBIC), dtype=np.float32) / 255.0


@lru_cache(maxsize=8)
def _watermark_cached(size: int, path: Optional[str]) -> np.ndarray:
    if path is not None:
        img = load_image(path)
    elif WATERMARK_ASSET.exists():
        img = load_image(WATERMARK_ASSET)
    else:
        img = make_sky()
    return resize(img, size, size) if img.shape[:2] != (size, size) else img


def default_watermark(size: int = 64, path: Optional[str] = None) -> np.ndarray:
    """The fixed source-state localized watermark at ``size x size``."""
    return _watermark_cached(size, path).copy()


TRAIN_IMAGES = ("astronaut", "coffee", "rocket", "hubble_deep_field", "immunohistochemistry",
                "retina", "colorwheel", "camera", "brick", "grass", "moon", "coins")
HELDOUT_IMAGES = ("chelsea", "gravel", "clock")


@lru_cache(maxsize=2)
def corpus_images(split: str = "train") -> tuple:
    """Bundled scikit-image photographs as float32 RGB arrays, plus two downscaled copies each."""
    from skimage import data as skdata

    names = {"train": TRAIN_IMAGES, "heldout": HELDOUT_IMAGES}[split]
    out = []
    for name in names:
        a = getattr(skdata, name)()
        if a.ndim == 2:
            a = np.stack([a] * 3, axis=-1)
        a = a[..., :3].astype(np.float32) / 255.0
        for scale in (1.0, 0.5, 0.25):
            h, w = int(a.shape[0] * scale), int(a.shape[1] * scale)
            if min(h, w) >= 96:
                out.append(a if scale == 1.0 else resize(a, h, w))
    return tuple(out)


def random_crops(count: int, size: int = 64, split: str = "train", seed: int = 0) -> np.ndarray:
    """``count x size x size x 3`` random crops with flips from the corpus."""
    imgs = [a for a in corpus_images(split) if min(a.shape[:2]) >= size]
    if not imgs:
        raise ValueError(f"no {split} image is at least {size}x{size}")
    rng = np.random.default_rng(seed)
    out = np.empty((count, size, size, 3), np.float32)
    for i in range(count):
        src = imgs[rng.integers(len(imgs))]
        top = rng.integers(0, src.shape[0] - size + 1)
        left = rng.integers(0, src.shape[1] - size + 1)
        crop = src[top:top + size, left:left + size]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = crop
    return out


def batch_tensor(images: np.ndarray) -> torch.Tensor:
    """NxHxWx3 numpy -> Nx3xHxW tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32).transpose(0, 3, 1, 2)))
