"""Differentiable degradations and the editing simulator used inside training.

Every operator maps an ``N x 3 x H x W`` tensor to one of the same shape and draws its
randomness from a ``torch.Generator`` seeded by ``AttackSpec.seed``, so a spec applied to
the same input is bit-reproducible.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import AttackSpec, MaskSpec, generate_random_mask

# --------------------------------------------------------------------------- jpeg

_LUMA = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=torch.float64)
_CHROMA = torch.full((8, 8), 99.0, dtype=torch.float64)
_CHROMA[:4, :4] = torch.tensor([[17, 18, 24, 47], [18, 21, 26, 66],
                                [24, 26, 56, 99], [47, 66, 99, 99]], dtype=torch.float64)


def quant_tables(quality: float) -> torch.Tensor:
    """IJG-scaled (3, 8, 8) quantisation tables for Y, Cb, Cr."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality {quality} outside [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    tabs = [torch.clamp(torch.floor((t * scale + 50) / 100), min=1) for t in (_LUMA, _CHROMA, _CHROMA)]
    return torch.stack(tabs)


def _dct_matrix(dtype) -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)
    d = torch.cos((2 * k[None, :] + 1) * k[:, None] * math.pi / 16) * math.sqrt(2 / 8)
    d[0] /= math.sqrt(2)
    return d.to(dtype)


_RGB2YCC = torch.tensor([[0.299, 0.587, 0.114],
                         [-0.168736, -0.331264, 0.5],
                         [0.5, -0.418688, -0.081312]], dtype=torch.float64)
_YCC2RGB = torch.linalg.inv(_RGB2YCC)


def soft_round(x: torch.Tensor, iters: int = 2) -> torch.Tensor:
    """Smooth staircase through the integers with zero slope there; a differentiable stand-in for round."""
    for _ in range(iters):
        x = x - torch.sin(2 * math.pi * x) / (2 * math.pi)
    return x


def jpeg(x: torch.Tensor, quality: float = 75, mode: str = "smooth") -> torch.Tensor:
    """JPEG-like compression (4:4:4, 8x8 DCT) with smooth or hard coefficient rounding."""
    n, c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    dt = x.dtype
    ycc = torch.einsum("ij,njhw->nihw", _RGB2YCC.to(dt), x * 255.0)
    ycc = ycc + torch.tensor([-128.0, 0.0, 0.0], dtype=dt).view(1, 3, 1, 1)
    H, W = ycc.shape[-2:]
    blocks = ycc.view(n, 3, H // 8, 8, W // 8, 8)
    d = _dct_matrix(dt)
    coef = torch.einsum("ui,ncaibj,vj->ncabuv", d, blocks, d)
    q = quant_tables(quality).to(dt).view(1, 3, 1, 1, 8, 8)
    scaled = coef / q
    if mode == "smooth":
        scaled = soft_round(scaled)
    elif mode == "hard":
        scaled = torch.round(scaled)
    else:
        raise ValueError(f"unknown jpeg rounding mode {mode!r}")
    rec = torch.einsum("ui,ncabuv,vj->ncaibj", d, scaled * q, d).reshape(n, 3, H, W)
    rec = rec + torch.tensor([128.0, 0.0, 0.0], dtype=dt).view(1, 3, 1, 1)
    rgb = torch.einsum("ij,njhw->nihw", _YCC2RGB.to(dt), rec) / 255.0
    return rgb[..., :h, :w]


# --------------------------------------------------------------------------- pixel ops

def gaussian_noise(x: torch.Tensor, sigma: float, gen: torch.Generator) -> torch.Tensor:
    """Additive noise, ``sigma`` on the 0-255 scale; reparameterised so d(out)/d(x) = 1."""
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device)
    return x + (sigma / 255.0) * noise


def salt_pepper(x: torch.Tensor, density: float, gen: torch.Generator) -> torch.Tensor:
    """Sets exactly ``round(density * H * W)`` pixels per image to 0 or 1."""
    n, c, h, w = x.shape
    count = int(round(density * h * w))
    m = torch.zeros(n, 1, h * w, dtype=x.dtype)
    v = torch.zeros(n, 1, h * w, dtype=x.dtype)
    for i in range(n):
        idx = torch.randperm(h * w, generator=gen)[:count]
        m[i, 0, idx] = 1.0
        v[i, 0, idx] = (torch.rand(count, generator=gen) < 0.5).to(x.dtype)
    m, v = m.view(n, 1, h, w).to(x.device), v.view(n, 1, h, w).to(x.device)
    return x * (1 - m) + v * m


def _gray(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])


def color_jitter(x: torch.Tensor, brightness: float = 1.0, contrast: float = 1.0,
                 saturation: float = 1.0) -> torch.Tensor:
    """Multiplicative brightness, contrast about the mean grey, saturation about the grey."""
    x = torch.clamp(x * brightness, 0, 1)
    mean = _gray(x).mean(dim=(1, 2, 3), keepdim=True)
    x = torch.clamp((x - mean) * contrast + mean, 0, 1)
    g = _gray(x)
    return torch.clamp((x - g) * saturation + g, 0, 1)


# --------------------------------------------------------------------------- surrogate

class SurrogateAutoencoder(nn.Module):
    """Small factor-8 bottleneck autoencoder standing in for a latent-diffusion VAE."""

    def __init__(self, latent: int = 16, width: int = 48):
        super().__init__()
        act = nn.SiLU
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), act(),
            nn.Conv2d(width, width, 3, 2, 1), act(),
            nn.Conv2d(width, width, 3, 2, 1), act(),
            nn.Conv2d(width, latent, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent, width, 3, 1, 1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, 1, 1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, 1, 1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, 3, 3, 1, 1),
        )

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % 8, (-w) % 8
        xp = F.pad(x, (0, pw, 0, ph), mode="replicate") if ph or pw else x
        y = self.decoder(self.encoder(xp * 2 - 1))
        return (torch.tanh(y) + 1)[..., :h, :w] / 2

    def freeze(self) -> "SurrogateAutoencoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def pretrain_surrogate(steps: int = 1500, latent: int = 16, size: int = 64, batch: int = 16,
                       lr: float = 2e-3, seed: int = 0, log: Optional[Callable] = None) -> SurrogateAutoencoder:
    from .data import batch_tensor, random_crops

    torch.manual_seed(seed)
    model = SurrogateAutoencoder(latent)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    for step in range(steps):
        x = batch_tensor(random_crops(batch, size, seed=seed * 100003 + step))
        loss = F.mse_loss(model(x), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log is not None and step % 100 == 0:
            log({"stage": 0, "step": step, "surrogate_mse": float(loss.detach())})
    return model.freeze()


# --------------------------------------------------------------------------- registry

@dataclass
class Operator:
    fn: Callable
    differentiable: bool = True
    needs_original: bool = False
    needs_surrogate: bool = False


def _check_range(name, value, lo, hi):
    if not lo <= value <= hi:
        raise ValueError(f"{name}={value} outside documented range [{lo}, {hi}]")


def _op_identity(x, p, gen, ctx):
    return x


def _op_jpeg(x, p, gen, ctx):
    q = float(p.get("q", p.get("quality", 75)))
    _check_range("q", q, 1, 100)
    return jpeg(x, q, p.get("mode", "smooth"))


def _op_noise(x, p, gen, ctx):
    sigma = float(p.get("sigma", 5.0))
    _check_range("sigma", sigma, 0, 255)
    return gaussian_noise(x, sigma, gen)


def _op_salt_pepper(x, p, gen, ctx):
    d = float(p.get("density", 0.02))
    _check_range("density", d, 0, 1)
    return salt_pepper(x, d, gen)


def _op_jitter(x, p, gen, ctx):
    b, c, s = (float(p.get(k, 1.0)) for k in ("brightness", "contrast", "saturation"))
    for name, v in (("brightness", b), ("contrast", c), ("saturation", s)):
        _check_range(name, v, 0, 3)
    return color_jitter(x, b, c, s)


def _op_surrogate(x, p, gen, ctx):
    return ctx.surrogate(x)


def _op_partial_removal(x, p, gen, ctx):
    n, _, h, w = x.shape
    cov = (float(p.get("lo", 0.05)), float(p.get("hi", 0.35)))
    seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=gen))
    m = torch.stack([torch.from_numpy(generate_random_mask(h, w, MaskSpec(cov), seed + i)) for i in range(n)])
    m = m[:, None].to(x.dtype).to(x.device)
    return (1 - m) * x + ctx.original * m


REGISTRY: dict[str, Operator] = {
    "identity": Operator(_op_identity),
    "jpeg": Operator(_op_jpeg),
    "gaussian_noise": Operator(_op_noise),
    "salt_pepper": Operator(_op_salt_pepper),
    "color_jitter": Operator(_op_jitter),
    "global_edit_surrogate": Operator(_op_surrogate, needs_surrogate=True),
    "partial_removal": Operator(_op_partial_removal, needs_original=True),
}


@dataclass
class AttackBank:
    """Holds the state some operators need (frozen surrogate) plus training ranges."""

    surrogate: Optional[nn.Module] = None
    jpeg_quality: tuple = (70, 85)
    noise_sigma: tuple = (1.0, 10.0)
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    salt_pepper: float = 0.02
    original: Optional[torch.Tensor] = field(default=None, repr=False)

    @classmethod
    def from_config(cls, acfg, surrogate=None) -> "AttackBank":
        return cls(surrogate=surrogate, jpeg_quality=tuple(acfg.jpeg_quality),
                   noise_sigma=tuple(acfg.noise_sigma), brightness=acfg.brightness,
                   contrast=acfg.contrast, saturation=acfg.saturation, salt_pepper=acfg.salt_pepper)

    def sample(self, kind: str, seed: int) -> AttackSpec:
        """Draw a spec of ``kind`` with parameters uniform over the training ranges."""
        rng = np.random.default_rng(seed)
        if kind == "jpeg":
            params = {"q": float(rng.uniform(*self.jpeg_quality))}
        elif kind == "gaussian_noise":
            params = {"sigma": float(rng.uniform(*self.noise_sigma))}
        elif kind == "salt_pepper":
            params = {"density": self.salt_pepper}
        elif kind == "color_jitter":
            params = {"brightness": float(1 + rng.uniform(-self.brightness, self.brightness)),
                      "contrast": float(1 + rng.uniform(-self.contrast, self.contrast)),
                      "saturation": float(1 + rng.uniform(-self.saturation, self.saturation))}
        elif kind in REGISTRY:
            params = {}
        else:
            raise KeyError(f"unknown attack kind {kind!r}")
        return AttackSpec(kind, params, int(rng.integers(0, 2 ** 31 - 1)))


def apply_degradation(img, spec: AttackSpec, bank: Optional[AttackBank] = None,
                      original: Optional[torch.Tensor] = None):
    """Apply one registered operator; numpy HxWx3 input returns numpy."""
    from .data import to_numpy, to_tensor

    if spec.kind not in REGISTRY:
        raise KeyError(f"unknown attack kind {spec.kind!r}; known: {sorted(REGISTRY)}")
    op = REGISTRY[spec.kind]
    as_numpy = isinstance(img, np.ndarray)
    x = to_tensor(img) if as_numpy else img
    ctx = copy.copy(bank) if bank is not None else AttackBank()
    if original is not None:
        ctx.original = to_tensor(original) if isinstance(original, np.ndarray) else original
    if op.needs_surrogate and ctx.surrogate is None:
        raise RuntimeError("global_edit_surrogate requires a loaded surrogate autoencoder")
    if op.needs_original and ctx.original is None:
        raise ValueError("partial_removal requires the original image")
    gen = torch.Generator().manual_seed(int(spec.seed))
    out = op.fn(x, spec.params, gen, ctx)
    return to_numpy(out) if as_numpy else out


def random_common(bank: AttackBank, seed: int, kinds=("identity", "jpeg", "gaussian_noise",
                                                      "color_jitter", "salt_pepper")) -> AttackSpec:
    rng = np.random.default_rng(seed)
    return bank.sample(kinds[rng.integers(len(kinds))], int(rng.integers(0, 2 ** 31 - 1)))


def branch_coin(seed: int) -> str:
    """Fair coin drawn as the sign of a standard normal sample."""
    p = np.random.default_rng(seed).standard_normal()
    return "global" if p > 0 else "local"


def simulate_aigc_edit(container: torch.Tensor, original: torch.Tensor, seed: int,
                       bank: AttackBank, degrade: Optional[AttackSpec] = None,
                       mask_spec: Optional[MaskSpec] = None, mask: Optional[torch.Tensor] = None):
    """Global branch: D(surrogate(container)); local branch: D((1-M) container + M original).

    ``degrade`` defaults to a random common degradation drawn from ``bank``; pass
    ``AttackSpec("identity")`` to isolate the branch semantics.  Returns (image, branch).
    """
    if container.shape != original.shape:
        raise ValueError(f"shape mismatch {tuple(container.shape)} vs {tuple(original.shape)}")
    branch = branch_coin(seed)
    if degrade is None:
        degrade = random_common(bank, seed + 1)
    if branch == "global":
        if bank.surrogate is None:
            raise RuntimeError("global branch requires a loaded surrogate autoencoder")
        edited = bank.surrogate(container)
    else:
        n, _, h, w = container.shape
        if mask is None:
            ms = mask_spec or MaskSpec()
            mask = torch.stack([torch.from_numpy(generate_random_mask(h, w, ms, seed * 7919 + i))
                                for i in range(n)])[:, None]
        mask = mask.to(container.dtype)
        edited = (1 - mask) * container + original * mask
    return apply_degradation(edited, degrade, bank), branch


# --------------------------------------------------------------------------- gradient audit

@dataclass
class AuditReport:
    kind: str
    trials: int
    checked: int
    passed_fraction: float
    passed: bool
    offending: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.kind}: {self.passed_fraction:.3f} of {self.checked} coordinates within tolerance"


def finite_difference_check(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                            coords: int = 64, eps: float = 1e-6, rtol: float = 1e-2,
                            seed: int = 0) -> tuple:
    """Autodiff vs central differences of ``sum(R * fn(x))`` at sampled coordinates of ``x``.

    Returns (fraction within tolerance, list of offending (flat_index, autodiff, fd)).
    """
    g = torch.Generator().manual_seed(seed)
    x = x.detach().to(torch.float64)
    with torch.no_grad():
        proj = torch.randn(fn(x).shape, generator=g, dtype=torch.float64)
    xr = x.clone().requires_grad_(True)
    (fn(xr) * proj).sum().backward()
    grad = xr.grad.detach().flatten()
    idx = torch.randperm(x.numel(), generator=g)[:coords]
    fd = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx.tolist()):
            xp, xm = x.clone().flatten(), x.clone().flatten()
            xp[i] += eps
            xm[i] -= eps
            fp = (fn(xp.view_as(x)) * proj).sum()
            fm = (fn(xm.view_as(x)) * proj).sum()
            fd[j] = (fp - fm) / (2 * eps)
    ad = grad[idx]
    floor = 1e-3 * max(float(fd.abs().max()), float(ad.abs().max()), 1e-12)
    rel = (ad - fd).abs() / torch.maximum(torch.maximum(ad.abs(), fd.abs()), torch.tensor(floor))
    ok = rel <= rtol
    bad = [(int(idx[j]), float(ad[j]), float(fd[j])) for j in torch.nonzero(~ok).flatten().tolist()]
    return float(ok.double().mean()), bad


def gradient_audit(kind: str, trials: int = 3, size: int = 16, params: Optional[dict] = None,
                   bank: Optional[AttackBank] = None, coords: int = 64,
                   rtol: float = 1e-2, min_fraction: float = 0.95) -> AuditReport:
    """Certify that operator ``kind`` backpropagates correct gradients."""
    op = REGISTRY[kind]
    if not op.differentiable:
        raise ValueError(f"{kind} is not flagged differentiable")
    bank = copy.copy(bank) if bank is not None else AttackBank()
    if bank.surrogate is not None:
        bank.surrogate = copy.deepcopy(bank.surrogate).double()
    fractions, offending, checked = [], [], 0
    for t in range(trials):
        g = torch.Generator().manual_seed(1000 + t)
        x = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64) * 0.8 + 0.1
        if op.needs_original:
            bank.original = torch.rand(1, 3, size, size, generator=g, dtype=torch.float64)
        spec = AttackSpec(kind, dict(params or {}), seed=t)
        frac, bad = finite_difference_check(lambda z: apply_degradation(z, spec, bank), x,
                                            coords=coords, rtol=rtol, seed=t)
        fractions.append(frac)
        offending.extend((t, *b) for b in bad)
        checked += coords
    mean = float(np.mean(fractions))
    return AuditReport(kind, trials, checked, mean, mean >= min_fraction, offending)
