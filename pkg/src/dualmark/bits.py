"""Bit-payload embedder (image translation with a residual) and sigmoid extractor."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SOFT_EPS = 1e-6
MSG_GRID = 8


def _conv(c_in, c_out, stride=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride, 1), nn.GroupNorm(min(8, c_out), c_out), nn.SiLU())


class BitEmbedder(nn.Module):
    """U-Net predicting a residual; bits are projected to a coarse message map fused at the bottleneck.

    The map is ``fusion_channels x 8 x 8`` (resized to the bottleneck grid), so every bit can
    drive its own spatial pattern; a tiled vector would leave a translation-equivariant decoder
    only near-uniform patterns to work with.  ``out = img + strength * residual``.
    """

    def __init__(self, payload_bits: int = 100, width: int = 32, fusion_channels: int = 64,
                 strength: float = 1.0):
        super().__init__()
        self.payload_bits = payload_bits
        w = width
        self.e0 = _conv(3, w)
        self.e1 = _conv(w, 2 * w, 2)
        self.e2 = _conv(2 * w, 4 * w, 2)
        self.e3 = _conv(4 * w, 4 * w, 2)
        self.fusion_channels = fusion_channels
        self.fuse = nn.Linear(payload_bits, fusion_channels * MSG_GRID * MSG_GRID)
        self.mid = _conv(4 * w + fusion_channels, 4 * w)
        self.d2 = _conv(8 * w, 4 * w)
        self.d1 = _conv(6 * w, 2 * w)
        self.d0 = _conv(3 * w, w)
        self.out = nn.Conv2d(w, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.strength = nn.Parameter(torch.tensor(float(strength)))

    def residual(self, img: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        if bits.shape[-1] != self.payload_bits:
            raise ValueError(f"payload has {bits.shape[-1]} bits, model expects {self.payload_bits}")
        x0 = self.e0(img * 2 - 1)
        x1 = self.e1(x0)
        x2 = self.e2(x1)
        x3 = self.e3(x2)
        msg = self.fuse(bits.to(img.dtype) * 2 - 1).view(-1, self.fusion_channels, MSG_GRID, MSG_GRID)
        if msg.shape[-2:] != x3.shape[-2:]:
            msg = F.interpolate(msg, size=x3.shape[-2:], mode="bilinear", align_corners=False)
        y = self.mid(torch.cat([x3, msg], 1))
        y = self.d2(torch.cat([F.interpolate(y, size=x2.shape[-2:], mode="nearest"), x2], 1))
        y = self.d1(torch.cat([F.interpolate(y, size=x1.shape[-2:], mode="nearest"), x1], 1))
        y = self.d0(torch.cat([F.interpolate(y, size=x0.shape[-2:], mode="nearest"), x0], 1))
        return self.out(y)

    def forward(self, img: torch.Tensor, bits: torch.Tensor, strength: Optional[float] = None):
        s = self.strength if strength is None else strength
        if isinstance(s, (int, float)) and s == 0:
            return img
        return img + s * self.residual(img, bits)


class BitExtractor(nn.Module):
    """Strided CNN pooled to a coarse ``grid x grid`` map and a linear head; ``forward`` returns logits."""

    def __init__(self, payload_bits: int = 100, width: int = 32, grid: int = 4):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            _conv(3, w), _conv(w, w),
            _conv(w, 2 * w, 2), _conv(2 * w, 2 * w),
            _conv(2 * w, 4 * w, 2), _conv(4 * w, 4 * w),
            _conv(4 * w, 8 * w, 2), _conv(8 * w, 8 * w),
        )
        self.grid = grid
        self.head = nn.Linear(8 * w * grid * grid, payload_bits)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        f = self.features(img * 2 - 1)
        return self.head(F.adaptive_avg_pool2d(f, self.grid).flatten(1))

    def soft_bits(self, img: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(img)).clamp(SOFT_EPS, 1 - SOFT_EPS)


class CopyrightCodec(nn.Module):
    def __init__(self, payload_bits: int = 100, width: int = 32, fusion_channels: int = 64,
                 strength: float = 1.0, working_size: int = 256):
        super().__init__()
        self.payload_bits = payload_bits
        self.working_size = working_size
        self.embedder = BitEmbedder(payload_bits, width, fusion_channels, strength)
        self.extractor = BitExtractor(payload_bits, width)

    def embed(self, img, bits, strength=None):
        return self.embedder(img, bits, strength)

    def extract(self, img):
        return self.extractor.soft_bits(img)

    # resolution scaling: the networks always run at working_size x working_size

    def _to_working(self, img):
        s = self.working_size
        if img.shape[-2:] == (s, s):
            return img
        return F.interpolate(img, size=(s, s), mode="bilinear", align_corners=False, antialias=True)

    def scaled_residual(self, img, bits, strength=None):
        small = self._to_working(img)
        res = self.embed(small, bits, strength) - small
        if res.shape[-2:] != img.shape[-2:]:
            res = F.interpolate(res, size=img.shape[-2:], mode="bicubic", align_corners=False)
        return res

    def embed_scaled(self, img, bits, strength=None):
        if min(img.shape[-2:]) < 64:
            raise ValueError(f"image {tuple(img.shape[-2:])} smaller than 64x64")
        if img.shape[-2:] == (self.working_size, self.working_size):
            return self.embed(img, bits, strength)
        return img + self.scaled_residual(img, bits, strength)

    def extract_scaled(self, img):
        if min(img.shape[-2:]) < 64:
            raise ValueError(f"image {tuple(img.shape[-2:])} smaller than 64x64")
        return self.extract(self._to_working(img))


def bits_tensor(bits, batch: int = 1) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(bits), dtype=torch.float32)
    if t.dim() == 1:
        t = t[None].expand(batch, -1)
    return t
