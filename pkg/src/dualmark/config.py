"""Run configuration: one dataclass section per module, loadable from YAML."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


@dataclass
class DataConfig:
    image_size: int = 64
    mask_coverage: tuple = (0.05, 0.35)
    mask_shapes: tuple = ("rect", "ellipse", "stroke")
    watermark: Optional[str] = None  # path override for the localized watermark asset


@dataclass
class TransformConfig:
    exp_clamp: float = 2.0


@dataclass
class LocalizedConfig:
    num_blocks: int = 16
    hidden: int = 32
    clamp: float = 2.0
    predictor_blocks: int = 4
    predictor_width: int = 32


@dataclass
class CopyrightConfig:
    payload_bits: int = 100
    working_size: int = 256
    width: int = 32
    fusion_channels: int = 64
    strength: float = 1.0


@dataclass
class AttackConfig:
    jpeg_quality: tuple = (70, 85)
    noise_sigma: tuple = (1.0, 10.0)
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    salt_pepper: float = 0.02
    surrogate_latent: int = 16
    surrogate_checkpoint: Optional[str] = None


@dataclass
class ExtractorConfig:
    pad_size: int = 256
    patch_size: int = 16
    window: int = 8
    depth: int = 4
    dim: int = 192
    heads: int = 6
    mlp_ratio: float = 4.0
    num_queries: int = 8
    beta_init: float = 0.1
    fpn_dim: int = 64
    pretrained: Optional[str] = None


@dataclass
class LossWeights:
    lambda_start: float = 0.05
    lambda_end: float = 27.5
    lambda_hold: float = 0.2  # fraction of stage-1 steps held at lambda_start
    lambda_ramp: float = 0.5  # fraction of stage-1 steps spent ramping lambda after the hold
    alpha1: float = 10.0
    alpha2: float = 10.0
    alpha3: float = 100.0
    gamma: float = 20.0
    edge_band: int = 3

    def lam(self, step: int, total: int) -> float:
        """Piecewise-linear, non-decreasing image-loss weight for the copyright stage."""
        hold = int(round(self.lambda_hold * total))
        ramp = max(1, int(round(self.lambda_ramp * total)))
        t = min(max(step - hold, 0), ramp) / ramp
        return self.lambda_start + (self.lambda_end - self.lambda_start) * t


@dataclass
class StageConfig:
    stage: int = 1
    steps: int = 1000
    batch_size: int = 32
    lr: float = 4e-6
    optimizer: str = "adamw"
    schedule: str = "cosine"
    warmup_fraction: float = 0.2  # surrogate attacks enabled after this fraction (stage 1)
    aigc_prob: float = 0.5
    checkpoint_every: int = 0
    log_every: int = 10
    seed: int = 0


def _default_stages() -> dict:
    return {
        "stage1": StageConfig(stage=1, lr=4e-6, optimizer="adamw", batch_size=32, schedule="cosine"),
        "stage2": StageConfig(stage=2, lr=1e-5, optimizer="adam", batch_size=8, schedule="constant"),
        "stage3": StageConfig(stage=3, lr=1e-4, optimizer="adamw", batch_size=16, schedule="cosine"),
    }


@dataclass
class TrainingConfig:
    stage1: StageConfig = field(default_factory=lambda: _default_stages()["stage1"])
    stage2: StageConfig = field(default_factory=lambda: _default_stages()["stage2"])
    stage3: StageConfig = field(default_factory=lambda: _default_stages()["stage3"])
    surrogate_steps: int = 1500
    surrogate_lr: float = 2e-3
    triplet_count: int = 2000
    triplet_attacks: tuple = ("identity", "jpeg", "gaussian_noise", "color_jitter", "salt_pepper")
    deterministic: bool = True


@dataclass
class EvalConfig:
    tau: float = 0.5
    psnr_cap: float = 100.0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    localized: LocalizedConfig = field(default_factory=LocalizedConfig)
    copyright: CopyrightConfig = field(default_factory=CopyrightConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    device: str = "cpu"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge(obj, updates: dict, where: str = ""):
    for key, value in updates.items():
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise TypeError(f"config section {where}{key} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)
    return obj


def from_dict(d: dict[str, Any], base: Optional[Config] = None) -> Config:
    cfg = copy.deepcopy(base) if base is not None else Config()
    return _merge(cfg, d or {})


def load_config(path: str | Path | None = None, profile: str = "desk") -> Config:
    base = PROFILES[profile]()
    if path is None:
        return base
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    profile = d.pop("profile", None)
    if profile is not None:
        base = PROFILES[profile]()
    return from_dict(d, base)


def dump_config(cfg: Config, path: str | Path) -> None:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    with open(path, "w") as fh:
        yaml.safe_dump(plain(cfg.to_dict()), fh, sort_keys=False)


def desk_profile() -> Config:
    return Config()


def paper_profile() -> Config:
    cfg = Config()
    cfg.extractor = ExtractorConfig(pad_size=1024, patch_size=16, window=14, depth=12, dim=768, heads=12)
    cfg.training.triplet_count = 20000
    return cfg


def toy_profile() -> Config:
    """Geometry and step counts for the 64x64 single-CPU end-to-end run."""
    cfg = Config()
    cfg.copyright.working_size = 64
    cfg.copyright.width = 16
    cfg.copyright.fusion_channels = 16
    cfg.extractor = ExtractorConfig(pad_size=64, patch_size=4, window=8, depth=4, dim=128, heads=4, fpn_dim=48)
    cfg.losses.alpha2 = 0.0
    t = cfg.training
    t.stage1 = StageConfig(stage=1, steps=6000, batch_size=16, lr=1e-3, optimizer="adamw",
                           schedule="cosine", warmup_fraction=0.2, aigc_prob=0.5, seed=1)
    t.stage2 = StageConfig(stage=2, steps=4000, batch_size=8, lr=1e-3, optimizer="adam",
                           schedule="cosine", seed=2)
    t.stage3 = StageConfig(stage=3, steps=2500, batch_size=16, lr=4e-4, optimizer="adamw",
                           schedule="cosine", seed=3)
    t.triplet_count = 2000
    return cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile, "toy": toy_profile}
