"""All networks of the dual-watermark system, the end-to-end pipeline, and checkpoints."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .attacks import AttackBank, SurrogateAutoencoder
from .bits import CopyrightCodec
from .config import Config, from_dict
from .data import batch_tensor, default_watermark
from .extractor import TamperExtractor
from .invertible import LocalizedCodec
from .transform import AdaptiveTransform


def quantize_tensor(x: torch.Tensor) -> torch.Tensor:
    """Clamp and round to the 8-bit grid, as a PNG round trip would."""
    return torch.floor(x.clamp(0, 1) * 255 + 0.5) / 255


class DualWatermarkSystem(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        c = cfg.copyright
        self.copyright = CopyrightCodec(c.payload_bits, c.width, c.fusion_channels, c.strength, c.working_size)
        self.transform = AdaptiveTransform(cfg.transform.exp_clamp)
        lc = cfg.localized
        self.localized = LocalizedCodec(lc.num_blocks, lc.hidden, lc.clamp, lc.predictor_blocks, lc.predictor_width)
        e = cfg.extractor
        self.extractor = TamperExtractor(e.pad_size, e.patch_size, e.window, e.depth, e.dim, e.heads,
                                         e.mlp_ratio, e.num_queries, e.beta_init, e.fpn_dim)
        self.surrogate = SurrogateAutoencoder(cfg.attacks.surrogate_latent).freeze()

    @property
    def payload_bits(self) -> int:
        return self.copyright.payload_bits

    def bank(self) -> AttackBank:
        return AttackBank.from_config(self.cfg.attacks, self.surrogate)

    def watermark(self, size: int, batch: int = 1) -> torch.Tensor:
        w = batch_tensor(default_watermark(size, self.cfg.data.watermark)[None])
        return w.expand(batch, -1, -1, -1)

    def embed(self, img: torch.Tensor, bits: torch.Tensor, wm: Optional[torch.Tensor] = None):
        """Adaptive transform -> invertible hiding -> bit embedding.  Returns (container, extras)."""
        if wm is None:
            wm = self.watermark(img.shape[-1], img.shape[0]).to(img)
        w_t, h_med = self.transform(wm, img)
        stego, z = self.localized.hide(img, w_t)
        if img.shape[-2:] == (self.copyright.working_size,) * 2:
            container = self.copyright.embed(stego, bits)
        else:
            container = self.copyright.embed_scaled(stego, bits)
        return container, {"w_transformed": w_t, "h_med": h_med, "stego": stego, "latent": z}

    def reveal_artifact(self, received: torch.Tensor):
        w_dec = self.localized.reveal(received)
        w_hat, h_hat = self.transform.inverse(w_dec, received)
        return w_hat, w_dec

    def decode(self, received: torch.Tensor) -> dict:
        soft = self.copyright.extract_scaled(received)
        w_hat, w_dec = self.reveal_artifact(received)
        mask = self.extractor(w_hat, received)
        return {"soft_bits": soft, "artifact": w_hat, "decoded": w_dec, "mask": mask}


# --------------------------------------------------------------------------- checkpoints

BLOB_NAMES = ("copyright", "transform", "localized", "extractor", "surrogate", "discriminator")


@dataclass
class Checkpoint:
    blobs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    schedule: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.__dict__, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls(**torch.load(path, map_location="cpu", weights_only=False))

    def blob_bytes(self, name: str) -> bytes:
        buf = io.BytesIO()
        torch.save({k: v.clone() for k, v in self.blobs[name].items()}, buf)
        return buf.getvalue()


def capture(system: DualWatermarkSystem, names=None, discriminator: Optional[nn.Module] = None,
            **extra) -> Checkpoint:
    names = names or [n for n in BLOB_NAMES if n != "discriminator"]
    blobs = {n: {k: v.detach().clone() for k, v in getattr(system, n).state_dict().items()} for n in names}
    if discriminator is not None:
        blobs["discriminator"] = {k: v.detach().clone() for k, v in discriminator.state_dict().items()}
    return Checkpoint(blobs=blobs, config=system.cfg.to_dict(), config_hash=system.cfg.hash(), **extra)


def restore(ckpt: Checkpoint, cfg: Optional[Config] = None) -> DualWatermarkSystem:
    """Build a system from the checkpoint's embedded config (or ``cfg``) and load every blob."""
    if cfg is None:
        cfg = from_dict(_strip_lists(ckpt.config))
    system = DualWatermarkSystem(cfg)
    for name, state in ckpt.blobs.items():
        if name == "discriminator":
            continue
        getattr(system, name).load_state_dict(state)
    system.surrogate.freeze()
    return system.eval()


def load_system(path: str | Path) -> DualWatermarkSystem:
    return restore(Checkpoint.load(path))


def _strip_lists(d):
    if isinstance(d, dict):
        return {k: _strip_lists(v) for k, v in d.items()}
    if isinstance(d, list):
        return tuple(d)
    return d


def random_bits(batch: int, length: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(0, 2, (batch, length), generator=gen).float()


def to_bits_array(t: torch.Tensor) -> np.ndarray:
    return (t.detach().cpu().numpy() >= 0.5).astype(np.uint8)
