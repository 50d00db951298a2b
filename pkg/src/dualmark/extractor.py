"""Degradation-aware tamper-mask extractor and the residual-subtraction baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


# --------------------------------------------------------------------------- baseline

def residual_subtraction_baseline(artifact, source, tau: float = 0.5):
    """Binary mask: max over channels of |artifact - source| >= tau.

    Works on HxWx3 numpy arrays (returns HxW) or Nx3xHxW tensors (returns Nx1xHxW).
    """
    if not 0 < tau < 1:
        raise ValueError(f"tau={tau} must lie in (0, 1)")
    if artifact.shape != source.shape:
        raise ValueError(f"shape mismatch {tuple(artifact.shape)} vs {tuple(source.shape)}")
    if isinstance(artifact, torch.Tensor):
        diff = (artifact - source).abs().amax(dim=1, keepdim=True)
        return (diff >= tau).to(artifact.dtype)
    diff = np.abs(np.asarray(artifact, np.float64) - np.asarray(source, np.float64)).max(axis=-1)
    return (diff >= tau).astype(np.float32)


# --------------------------------------------------------------------------- tokens

@dataclass
class TokenGrid:
    tokens: torch.Tensor  # N x dim x grid_h x grid_w
    patch: int
    provenance: str
    crop: tuple  # original (H, W) before padding

    @property
    def grid(self) -> tuple:
        return tuple(self.tokens.shape[-2:])


def pad_to(x: torch.Tensor, size: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h > size or w > size:
        raise ValueError(f"input {h}x{w} larger than pad size {size}")
    return F.pad(x, (0, size - w, 0, size - h))


class DegradationFusion(nn.Module):
    """``T~ = T_loc + beta * Conv(F_rec (*) Q)`` with ``F_rec = sigmoid(MLP(GAP(T_rec)))``.

    GAP pools tokens over the grid; the K gated queries form a K-channel signal along the
    feature axis, which a width-3 Conv1d maps to one vector broadcast to every token.
    """

    def __init__(self, dim: int, num_queries: int = 8, beta_init: float = 0.1):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.02)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.conv = nn.Conv1d(num_queries, 1, 3, padding=1)
        self.beta = nn.Parameter(torch.tensor(float(beta_init)))

    def gate(self, t_rec: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(t_rec.mean(dim=(2, 3))))

    def forward(self, t_loc: torch.Tensor, t_rec: torch.Tensor) -> torch.Tensor:
        if t_loc.shape[1] != self.queries.shape[1] or t_rec.shape[1] != self.queries.shape[1]:
            raise ValueError(f"token dim {t_loc.shape[1]}/{t_rec.shape[1]} != query dim {self.queries.shape[1]}")
        f_rec = self.gate(t_rec)                          # N x dim
        gated = f_rec[:, None, :] * self.queries[None]    # N x K x dim
        shift = self.conv(gated)[:, 0]                    # N x dim
        return t_loc + self.beta * shift[:, :, None, None]


# --------------------------------------------------------------------------- backbone

class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):  # B x L x dim
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.proj(y.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block; attention restricted to ``window`` x ``window`` tiles when set."""

    def __init__(self, dim, heads, mlp_ratio=4.0, window=0):
        super().__init__()
        self.window = window
        self.n1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.n2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _attend(self, x):  # N x H x W x dim
        n, h, w, d = x.shape
        ws = self.window
        if not ws or (ws >= h and ws >= w):
            return self.attn(x.reshape(n, h * w, d)).view(n, h, w, d)
        ph, pw = (-h) % ws, (-w) % ws
        x = F.pad(x, (0, 0, 0, pw, 0, ph))
        H, W = h + ph, w + pw
        t = x.view(n, H // ws, ws, W // ws, ws, d).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, d)
        t = self.attn(t).view(n, H // ws, W // ws, ws, ws, d).permute(0, 1, 3, 2, 4, 5)
        return t.reshape(n, H, W, d)[:, :h, :w]

    def forward(self, x):
        x = x + self._attend(self.n1(x))
        return x + self.mlp(self.n2(x))


class TamperExtractor(nn.Module):
    """Artifact map + received image -> soft tamper mask at the input resolution."""

    def __init__(self, pad_size=256, patch_size=16, window=8, depth=4, dim=192, heads=6,
                 mlp_ratio=4.0, num_queries=8, beta_init=0.1, fpn_dim=64):
        super().__init__()
        if pad_size % patch_size:
            raise ValueError("pad size must be a multiple of the patch size")
        self.pad_size, self.patch = pad_size, patch_size
        g = pad_size // patch_size
        self.embed_loc = nn.Conv2d(3, dim, patch_size, patch_size)
        self.embed_rec = nn.Conv2d(3, dim, patch_size, patch_size)
        self.fusion = DegradationFusion(dim, num_queries, beta_init)
        self.merge = nn.Linear(2 * dim, dim)
        self.pos = nn.Parameter(torch.zeros(1, g, g, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        # windowed blocks, last one global
        self.blocks = nn.ModuleList(
            Block(dim, heads, mlp_ratio, window if i < depth - 1 else 0) for i in range(depth))
        self.norm = nn.LayerNorm(dim)
        # simple feature pyramid at 4x, 2x, 1x, 1/2x of the token grid
        self.up4 = nn.Sequential(nn.ConvTranspose2d(dim, dim // 2, 2, 2), nn.GELU(),
                                 nn.ConvTranspose2d(dim // 2, fpn_dim, 2, 2))
        self.up2 = nn.ConvTranspose2d(dim, fpn_dim, 2, 2)
        self.same = nn.Conv2d(dim, fpn_dim, 1)
        self.down2 = nn.Sequential(nn.MaxPool2d(2), nn.Conv2d(dim, fpn_dim, 1))
        self.smooth = nn.ModuleList(nn.Conv2d(fpn_dim, fpn_dim, 3, padding=1) for _ in range(4))
        # per-pixel linear mask decoder over pyramid features plus raw pixels
        self.decoder = nn.Sequential(
            nn.Conv2d(4 * fpn_dim + 6, fpn_dim, 1), nn.GELU(),
            nn.Conv2d(fpn_dim, fpn_dim, 1), nn.GELU(),
            nn.Conv2d(fpn_dim, 1, 1))

    def tokenize(self, artifact: torch.Tensor, received: torch.Tensor):
        if artifact.shape != received.shape:
            raise ValueError(f"shape mismatch {tuple(artifact.shape)} vs {tuple(received.shape)}")
        crop = tuple(artifact.shape[-2:])
        a, r = pad_to(artifact, self.pad_size), pad_to(received, self.pad_size)
        return (TokenGrid(self.embed_loc(a), self.patch, "artifact", crop),
                TokenGrid(self.embed_rec(r), self.patch, "received", crop))

    def fuse_degradation(self, t_loc: TokenGrid, t_rec: TokenGrid) -> TokenGrid:
        return TokenGrid(self.fusion(t_loc.tokens, t_rec.tokens), t_loc.patch, "artifact", t_loc.crop)

    def logits(self, artifact: torch.Tensor, received: torch.Tensor) -> torch.Tensor:
        t_loc, t_rec = self.tokenize(artifact, received)
        t_fused = self.fuse_degradation(t_loc, t_rec)
        x = torch.cat([t_fused.tokens, t_rec.tokens], 1).permute(0, 2, 3, 1)
        x = self.merge(x) + self.pos
        for blk in self.blocks:
            x = blk(x)
        f = self.norm(x).permute(0, 3, 1, 2)
        levels = [self.up4(f), self.up2(f), self.same(f), self.down2(f)]
        size = levels[0].shape[-2:]
        feats = [F.interpolate(s(lv), size=size, mode="bilinear", align_corners=False) if lv.shape[-2:] != size
                 else s(lv) for s, lv in zip(self.smooth, levels)]
        feats = torch.cat(feats, 1)
        feats = F.interpolate(feats, size=(self.pad_size, self.pad_size), mode="bilinear", align_corners=False)
        pix = torch.cat([pad_to(artifact, self.pad_size), pad_to(received, self.pad_size)], 1)
        out = self.decoder(torch.cat([feats, pix], 1))
        h, w = t_loc.crop
        return out[..., :h, :w]

    def forward(self, artifact: torch.Tensor, received: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(artifact, received))

    extract_mask = forward
