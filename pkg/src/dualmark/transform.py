"""One-step reversible affine transform between the fixed and the content-aware watermark."""
from __future__ import annotations

import torch
import torch.nn as nn


def squash(x: torch.Tensor, bound: float) -> torch.Tensor:
    """Smoothly limit ``x`` to (-bound, bound) with unit slope at zero."""
    return bound * torch.tanh(x / bound)


class AdaptiveTransform(nn.Module):
    """``phi1``, ``phi2``, ``phi3`` are single zero-initialised 3x3 convolutions.

    forward:  W~ = W + phi1(I);   H = I * exp(s(W~)) + phi3(W~)
    inverse:  H^ = (I' - phi3(W')) * exp(-s(W'));   W^ = W' - phi1(I')

    with ``s = squash(phi2(.), exp_clamp)``.  Nothing is clamped to [0, 1].
    """

    def __init__(self, exp_clamp: float = 2.0):
        super().__init__()
        self.exp_clamp = exp_clamp
        self.phi1 = nn.Conv2d(3, 3, 3, padding=1)
        self.phi2 = nn.Conv2d(3, 3, 3, padding=1)
        self.phi3 = nn.Conv2d(3, 3, 3, padding=1)
        for conv in (self.phi1, self.phi2, self.phi3):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def scale(self, w: torch.Tensor) -> torch.Tensor:
        return squash(self.phi2(w), self.exp_clamp)

    @staticmethod
    def _check(a: torch.Tensor, b: torch.Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")

    def forward(self, w: torch.Tensor, img: torch.Tensor):
        self._check(w, img)
        w_t = w + self.phi1(img)
        h = img * torch.exp(self.scale(w_t)) + self.phi3(w_t)
        if not (torch.isfinite(w_t).all() and torch.isfinite(h).all()):
            raise FloatingPointError("adaptive transform produced non-finite values")
        return w_t, h

    def inverse(self, w_dec: torch.Tensor, img_rec: torch.Tensor):
        self._check(w_dec, img_rec)
        h = (img_rec - self.phi3(w_dec)) * torch.exp(-self.scale(w_dec))
        w_hat = w_dec - self.phi1(img_rec)
        return w_hat, h
