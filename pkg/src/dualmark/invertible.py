"""Invertible image-in-image hiding of the localized watermark."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transform import squash


class DenseBlock(nn.Module):
    """Three densely connected 3x3 convolutions; the last one starts at zero."""

    def __init__(self, c_in: int, c_out: int, growth: int = 32):
        super().__init__()
        self.c1 = nn.Conv2d(c_in, growth, 3, padding=1)
        self.c2 = nn.Conv2d(c_in + growth, growth, 3, padding=1)
        self.c3 = nn.Conv2d(c_in + 2 * growth, c_out, 3, padding=1)
        nn.init.zeros_(self.c3.weight)
        nn.init.zeros_(self.c3.bias)

    def forward(self, x):
        a = F.leaky_relu(self.c1(x), 0.2)
        b = F.leaky_relu(self.c2(torch.cat([x, a], 1)), 0.2)
        return self.c3(torch.cat([x, a, b], 1))


class CouplingBlock(nn.Module):
    """Two-branch additive affine coupling.

    forward:  y1 = x1 + f(x2);  y2 = x2 * exp(s(y1)) + t(y1)
    backward: x2 = (y2 - t(y1)) * exp(-s(y1));  x1 = y1 - f(x2)
    """

    def __init__(self, c1: int, c2: int, hidden: int = 32, clamp: float = 2.0):
        super().__init__()
        self.clamp = clamp
        self.f = DenseBlock(c2, c1, hidden)
        self.s = DenseBlock(c1, c2, hidden)
        self.t = DenseBlock(c1, c2, hidden)

    def forward(self, x1, x2):
        y1 = x1 + self.f(x2)
        y2 = x2 * torch.exp(squash(self.s(y1), self.clamp)) + self.t(y1)
        return y1, y2

    def backward(self, y1, y2):
        x2 = (y2 - self.t(y1)) * torch.exp(-squash(self.s(y1), self.clamp))
        x1 = y1 - self.f(x2)
        return x1, x2


class CouplingStack(nn.Module):
    def __init__(self, channels: int = 12, num_blocks: int = 16, hidden: int = 32, clamp: float = 2.0):
        super().__init__()
        self.blocks = nn.ModuleList(CouplingBlock(channels, channels, hidden, clamp) for _ in range(num_blocks))

    def forward(self, x1, x2):
        for blk in self.blocks:
            x1, x2 = blk(x1, x2)
        return x1, x2

    def backward(self, y1, y2):
        for blk in reversed(self.blocks):
            y1, y2 = blk.backward(y1, y2)
        return y1, y2


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.a = nn.Conv2d(c, c, 3, padding=1)
        self.b = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.b(F.leaky_relu(self.a(x), 0.2))


class HighFreqPredictor(nn.Module):
    """Residual-block network estimating the discarded latent from the received image."""

    def __init__(self, c_latent: int = 12, width: int = 32, blocks: int = 4):
        super().__init__()
        self.head = nn.Conv2d(12, width, 3, padding=1)
        self.body = nn.Sequential(*(ResBlock(width) for _ in range(blocks)))
        self.tail = nn.Conv2d(width, c_latent, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, img_rec):
        x = F.pixel_unshuffle(img_rec, 2)
        return self.tail(self.body(self.head(x)))


class LocalizedCodec(nn.Module):
    """Hides a watermark image in a host; reveals it from a received image.

    Both branches are pixel-unshuffled by 2 (3 -> 12 channels at half resolution) before the
    coupling stack.  Deployment-time ``reveal`` substitutes the predicted latent for the
    forward latent, which callers only get back from ``hide`` for testing.
    """

    def __init__(self, num_blocks: int = 16, hidden: int = 32, clamp: float = 2.0,
                 predictor_blocks: int = 4, predictor_width: int = 32):
        super().__init__()
        self.stack = CouplingStack(12, num_blocks, hidden, clamp)
        self.predictor = HighFreqPredictor(12, predictor_width, predictor_blocks)

    @staticmethod
    def _check(img: torch.Tensor, other: Optional[torch.Tensor] = None):
        if img.dim() != 4 or img.shape[1] != 3 or img.shape[-1] % 2 or img.shape[-2] % 2:
            raise ValueError(f"expected Nx3xHxW with even H, W; got {tuple(img.shape)}")
        if other is not None and other.shape != img.shape:
            raise ValueError(f"shape mismatch: {tuple(img.shape)} vs {tuple(other.shape)}")

    def hide(self, host: torch.Tensor, wm: torch.Tensor):
        self._check(host, wm)
        y1, z = self.stack(F.pixel_unshuffle(host, 2), F.pixel_unshuffle(wm, 2))
        return F.pixel_shuffle(y1, 2), z

    def predict_high_freq(self, img_rec: torch.Tensor) -> torch.Tensor:
        self._check(img_rec)
        return self.predictor(img_rec)

    def reveal(self, img_rec: torch.Tensor, latent: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check(img_rec)
        z = self.predict_high_freq(img_rec) if latent is None else latent
        _, w = self.stack.backward(F.pixel_unshuffle(img_rec, 2), z)
        return F.pixel_shuffle(w, 2)

    def unhide(self, stego: torch.Tensor, latent: torch.Tensor):
        """Exact inverse of ``hide`` given its true latent: returns (host, watermark)."""
        x1, x2 = self.stack.backward(F.pixel_unshuffle(stego, 2), latent)
        return F.pixel_shuffle(x1, 2), F.pixel_shuffle(x2, 2)
