"""Training objectives for the three stages."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights

BCE_EPS = 1e-7


def bce(p: torch.Tensor, target: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary cross-entropy on probabilities clipped to [eps, 1 - eps]; mean over ``weight`` support."""
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    t = target.to(p.dtype)
    ell = -(t * torch.log(p) + (1 - t) * torch.log(1 - p))
    if weight is None:
        return ell.mean()
    total = weight.sum()
    return (ell * weight).sum() / total if total > 0 else ell.sum() * 0


def l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(a, b)


def compute_copyright_loss(w_hat, w, container, original, weights: LossWeights, step: int,
                           total_steps: int, from_logits: bool = False) -> dict:
    if w_hat.shape != w.shape:
        raise ValueError(f"payload length mismatch {tuple(w_hat.shape)} vs {tuple(w.shape)}")
    if from_logits:
        bit = F.binary_cross_entropy_with_logits(w_hat, w.to(w_hat.dtype))
    else:
        bit = bce(w_hat, w)
    lam = weights.lam(step, total_steps)
    img = l2(container, original)
    return {"loss": bit + lam * img, "bce": bit, "l2": img, "lambda": lam}


class PatchDiscriminator(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, 1, 1))

    def forward(self, x):
        return self.net(x * 2 - 1)


def gan_generator_loss(disc: nn.Module, fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-disc(fake)).mean()


def gan_discriminator_loss(disc: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-disc(real)).mean() + F.softplus(disc(fake.detach())).mean()


class FeatureNet(nn.Module):
    """Fixed convolutional feature extractor for a perceptual distance.

    Weights are drawn from a fixed seed (or loaded from ``weights``) and never trained.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 64), weights: Optional[str] = None):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, c = [], 3
        for w in widths:
            conv = nn.Conv2d(c, w, 3, 2 if c != 3 else 1, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (9 * c)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c = w
        self.layers = nn.ModuleList(layers)
        if weights is not None:
            self.load_state_dict(torch.load(weights, map_location="cpu"))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats, h = [], x * 2 - 1
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


def perceptual_distance(net: FeatureNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between channel-normalised features, averaged over layers."""
    total = 0.0
    fa, fb = net(a), net(b)
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=1, keepdim=True) + 1e-8)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-8)
        total = total + ((x - y) ** 2).sum(dim=1).mean()
    return total / len(fa)


def compute_localization_loss(w_hat, w, container, original, weights: LossWeights,
                              disc: Optional[nn.Module] = None,
                              feature_net: Optional[FeatureNet] = None) -> dict:
    if weights.alpha2 and disc is None:
        raise ValueError("adversarial term requested but no discriminator given")
    if weights.alpha3 and feature_net is None:
        raise ValueError("perceptual term requested but no feature network given")
    wm = l2(w_hat, w)
    img = l2(container, original)
    adv = gan_generator_loss(disc, container) if weights.alpha2 else container.new_zeros(())
    per = perceptual_distance(feature_net, container, original) if weights.alpha3 else container.new_zeros(())
    loss = wm + weights.alpha1 * img + weights.alpha2 * adv + weights.alpha3 * per
    return {"loss": loss, "wm_l2": wm, "img_l2": img, "gan": adv, "perceptual": per}


def boundary_band(mask: torch.Tensor, width: int = 3) -> torch.Tensor:
    """Pixels within ``width`` of the mask boundary (Nx1xHxW binary in, same out)."""
    dil = F.max_pool2d(mask, 3, 1, 1)
    ero = -F.max_pool2d(-mask, 3, 1, 1)
    edge = (dil - ero).clamp(0, 1)
    if width > 0:
        edge = F.max_pool2d(edge, 2 * width + 1, 1, width)
    return edge


def compute_extractor_loss(m_hat, m_gt, weights: LossWeights, from_logits: bool = False) -> dict:
    if m_hat.shape != m_gt.shape:
        raise ValueError(f"shape mismatch {tuple(m_hat.shape)} vs {tuple(m_gt.shape)}")
    if not bool(((m_gt == 0) | (m_gt == 1)).all()):
        raise ValueError("ground-truth mask must be binary")
    gt = m_gt.to(m_hat.dtype)
    band = boundary_band(gt, weights.edge_band)
    if from_logits:
        ell = F.binary_cross_entropy_with_logits(m_hat, gt, reduction="none")
        main = ell.mean()
        edge = (ell * band).sum() / band.sum() if band.sum() > 0 else ell.sum() * 0
    else:
        main = bce(m_hat, gt)
        edge = bce(m_hat, gt, band)
    return {"loss": main + weights.gamma * edge, "bce": main, "edge": edge}
