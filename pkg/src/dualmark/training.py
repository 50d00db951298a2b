"""Three-stage training: copyright codec, joint localized hiding, tamper extractor."""
from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .attacks import AttackBank, apply_degradation, pretrain_surrogate, random_common, simulate_aigc_edit
from .config import Config, StageConfig
from .data import (AttackSpec, MaskSpec, batch_tensor, generate_random_mask, random_crops, random_skies)
from .losses import (FeatureNet, PatchDiscriminator, compute_copyright_loss, compute_extractor_loss,
                     compute_localization_loss, gan_discriminator_loss)
from .system import Checkpoint, DualWatermarkSystem, capture, quantize_tensor, random_bits, restore

log = logging.getLogger(__name__)

STAGE_FILES = {1: "stage1.pt", 2: "stage2.pt", 3: "stage3.pt"}
TRIPLET_FILE = "triplets.pt"


class TrainingLog:
    """Line-delimited JSON records, also kept in memory."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.records: list = []

    def __call__(self, record: dict) -> None:
        record = {k: (float(v.detach()) if isinstance(v, torch.Tensor) else float(v) if isinstance(v, np.floating) else v) for k, v in record.items()}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_optimizer(params, sc: StageConfig):
    params = [p for p in params if p.requires_grad]
    if sc.optimizer == "adamw":
        opt = torch.optim.AdamW(params, lr=sc.lr, weight_decay=1e-4)
    elif sc.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=sc.lr)
    else:
        raise ValueError(f"unknown optimizer {sc.optimizer!r}")
    if sc.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: 0.02 + 0.98 * 0.5 * (1 + math.cos(math.pi * min(s, sc.steps) / max(sc.steps, 1))))
    elif sc.schedule == "constant":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    else:
        raise ValueError(f"unknown schedule {sc.schedule!r}")
    return opt, sched


def _check_finite(losses: dict, stage: int, step: int) -> None:
    bad = {k: float(v) for k, v in losses.items()
           if isinstance(v, torch.Tensor) and not torch.isfinite(v).all()}
    if bad:
        raise FloatingPointError(f"stage {stage} step {step}: non-finite loss terms {bad}")


def _step_seed(sc: StageConfig, step: int) -> int:
    return (sc.seed * 1_000_003 + step * 7919) % (2 ** 31 - 1)


def _freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _mask_spec(cfg: Config) -> MaskSpec:
    return MaskSpec(tuple(cfg.data.mask_coverage), tuple(cfg.data.mask_shapes))


# --------------------------------------------------------------------------- stage 1

def train_copyright(cfg: Config, system: DualWatermarkSystem, logger: Callable,
                    corpus: Optional[np.ndarray] = None) -> dict:
    sc = cfg.training.stage1
    size = cfg.copyright.working_size
    codec = system.copyright
    codec.train()
    bank = system.bank()
    opt, sched = make_optimizer(codec.parameters(), sc)
    warmup = int(round(sc.warmup_fraction * sc.steps))
    gen = torch.Generator().manual_seed(sc.seed)
    for step in range(sc.steps):
        seed = _step_seed(sc, step)
        rng = np.random.default_rng(seed)
        imgs = batch_tensor(_batch(corpus, sc.batch_size, size, seed))
        bits = random_bits(sc.batch_size, codec.payload_bits, gen)
        con = codec.embed(imgs, bits)
        if step >= warmup and rng.random() < sc.aigc_prob:
            rec, branch = simulate_aigc_edit(con, imgs, seed, bank, mask_spec=_mask_spec(cfg))
        else:
            rec, branch = apply_degradation(con, random_common(bank, seed), bank), "common"
        logits = codec.extractor(rec)
        losses = compute_copyright_loss(logits, bits, con, imgs, cfg.losses, step, sc.steps, from_logits=True)
        _check_finite(losses, 1, step)
        opt.zero_grad()
        losses["loss"].backward()
        opt.step()
        sched.step()
        if step % sc.log_every == 0 or step == sc.steps - 1:
            acc = float(((logits > 0).float() == bits).float().mean())
            logger({"stage": 1, "step": step, "branch": branch, "bit_acc": acc,
                    **{k: v for k, v in losses.items()}})
    codec.eval()
    return {"steps": sc.steps, "warmup": warmup}


def _batch(corpus, batch, size, seed):
    if corpus is None:
        return random_crops(batch, size, seed=seed)
    idx = np.random.default_rng(seed).integers(0, len(corpus), batch)
    return corpus[idx]


# --------------------------------------------------------------------------- stage 2

def train_localized(cfg: Config, system: DualWatermarkSystem, logger: Callable,
                    corpus: Optional[np.ndarray] = None) -> Optional[nn.Module]:
    sc = cfg.training.stage2
    size = cfg.data.image_size
    _freeze(system.copyright)
    system.transform.train()
    system.localized.train()
    feature_net = FeatureNet() if cfg.losses.alpha3 else None
    disc = PatchDiscriminator() if cfg.losses.alpha2 else None
    params = list(system.transform.parameters()) + list(system.localized.parameters())
    opt, sched = make_optimizer(params, sc)
    if disc is not None:
        d_opt = torch.optim.Adam(disc.parameters(), lr=sc.lr, betas=(0.5, 0.999))
    skies = batch_tensor(random_skies(512, size, seed=sc.seed))
    fixed = system.watermark(size)
    gen = torch.Generator().manual_seed(sc.seed)
    for step in range(sc.steps):
        seed = _step_seed(sc, step)
        rng = np.random.default_rng(seed)
        imgs = batch_tensor(_batch(corpus, sc.batch_size, size, seed))
        wm = skies[rng.integers(0, len(skies), sc.batch_size)]
        wm[rng.random(sc.batch_size) < 0.125] = fixed[0]
        bits = random_bits(sc.batch_size, system.payload_bits, gen)
        w_t, _ = system.transform(wm, imgs)
        stego, _ = system.localized.hide(imgs, w_t)
        con = system.copyright.embed(stego, bits)
        if rng.random() < 0.5:
            rec = apply_degradation(con, AttackSpec("jpeg", {"q": float(rng.uniform(*cfg.attacks.jpeg_quality))}))
        else:
            rec = con
        rec = rec + (torch.rand(rec.shape, generator=gen) - 0.5) / 255.0
        w_dec = system.localized.reveal(rec)
        w_hat, _ = system.transform.inverse(w_dec, rec)
        losses = compute_localization_loss(w_hat, wm, con, imgs, cfg.losses, disc, feature_net)
        _check_finite(losses, 2, step)
        opt.zero_grad()
        losses["loss"].backward()
        nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        sched.step()
        if disc is not None:
            d_loss = gan_discriminator_loss(disc, imgs, con)
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
        if step % sc.log_every == 0 or step == sc.steps - 1:
            with torch.no_grad():
                psnr_c = -10 * math.log10(max(float(((con - imgs) ** 2).mean()), 1e-10))
                psnr_w = -10 * math.log10(max(float(((w_dec - w_t) ** 2).mean()), 1e-10))
            logger({"stage": 2, "step": step, "psnr_container": psnr_c, "psnr_watermark": psnr_w,
                    **{k: v for k, v in losses.items()}})
    system.transform.eval()
    system.localized.eval()
    return disc


# --------------------------------------------------------------------------- triplets

EDIT_KINDS = ("splice", "regenerate")


def make_edit(kind: str, container: torch.Tensor, original: torch.Tensor, donor: torch.Tensor,
              system: DualWatermarkSystem) -> torch.Tensor:
    """Stand-ins for local editing: foreign content, or content regenerated without the watermark."""
    if kind == "splice":
        return donor
    if kind == "regenerate":
        return system.surrogate(original)
    raise ValueError(f"unknown edit kind {kind!r}")


@torch.no_grad()
def tamper_sample(system: DualWatermarkSystem, img: torch.Tensor, bits: torch.Tensor, mask: torch.Tensor,
                  edit: str, donor: torch.Tensor, attack: AttackSpec) -> dict:
    """Embed both watermarks, quantize, tamper, degrade, quantize, decode the artifact map."""
    con, _ = system.embed(img, bits)
    con = quantize_tensor(con)
    edited = make_edit(edit, con, img, donor, system)
    m = mask.to(img.dtype)
    rec = quantize_tensor(apply_degradation(con * (1 - m) + edited * m, attack, system.bank()))
    w_hat, _ = system.reveal_artifact(rec)
    return {"container": con, "received": rec, "artifact": w_hat}


@torch.no_grad()
def build_extractor_triplets(system: DualWatermarkSystem, count: int, attacks: Sequence[str], seed: int = 0,
                             size: Optional[int] = None, split: str = "train",
                             mask_spec: Optional[MaskSpec] = None) -> dict:
    """``count`` samples of (artifact map, received image, ground-truth mask)."""
    size = size or system.cfg.data.image_size
    mask_spec = mask_spec or _mask_spec(system.cfg)
    bank = system.bank()
    out = {"artifact": torch.empty(count, 3, size, size), "received": torch.empty(count, 3, size, size),
           "mask": torch.empty(count, 1, size, size), "attack": [], "edit": []}
    rng = np.random.default_rng(seed)
    crops = random_crops(2 * count, size, split=split, seed=seed) if count else None
    gen = torch.Generator().manual_seed(seed)
    for i in range(count):
        s = int(rng.integers(2 ** 31 - 1))
        img = batch_tensor(crops[2 * i:2 * i + 1])
        donor = batch_tensor(crops[2 * i + 1:2 * i + 2])
        bits = random_bits(1, system.payload_bits, gen)
        mask = torch.from_numpy(generate_random_mask(size, size, mask_spec, s))[None, None]
        kind = attacks[int(rng.integers(len(attacks)))]
        spec = bank.sample(kind, s)
        edit = EDIT_KINDS[int(rng.integers(len(EDIT_KINDS)))]
        res = tamper_sample(system, img, bits, mask, edit, donor, spec)
        out["artifact"][i] = res["artifact"][0]
        out["received"][i] = res["received"][0]
        out["mask"][i] = mask[0]
        out["attack"].append(str(spec))
        out["edit"].append(edit)
    return out


# --------------------------------------------------------------------------- stage 3

def train_extractor(cfg: Config, system: DualWatermarkSystem, triplets: dict, logger: Callable) -> None:
    sc = cfg.training.stage3
    ext = system.extractor
    ext.train()
    opt, sched = make_optimizer(ext.parameters(), sc)
    n = len(triplets["mask"])
    if n == 0:
        raise ValueError("no triplets to train on")
    for step in range(sc.steps):
        rng = np.random.default_rng(_step_seed(sc, step))
        idx = torch.from_numpy(rng.integers(0, n, sc.batch_size))
        a, r, m = triplets["artifact"][idx], triplets["received"][idx], triplets["mask"][idx]
        if rng.random() < 0.5:
            a, r, m = a.flip(-1), r.flip(-1), m.flip(-1)
        logits = ext.logits(a, r)
        losses = compute_extractor_loss(logits, m, cfg.losses, from_logits=True)
        _check_finite(losses, 3, step)
        opt.zero_grad()
        losses["loss"].backward()
        nn.utils.clip_grad_norm_(ext.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % sc.log_every == 0 or step == sc.steps - 1:
            with torch.no_grad():
                pred = (logits > 0).float()
                tp = float((pred * m).sum())
                f1 = 2 * tp / max(float(pred.sum() + m.sum()), 1.0)
            logger({"stage": 3, "step": step, "f1": f1, **{k: v for k, v in losses.items()}})
    ext.eval()


# --------------------------------------------------------------------------- orchestration

def run_stage(cfg: Config, stage: int, workdir: str | Path, logger: Optional[Callable] = None,
              corpus: Optional[np.ndarray] = None) -> Checkpoint:
    """Run one stage, reading prerequisites from and writing its checkpoint to ``workdir``."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    logger = logger or TrainingLog(workdir / "train_log.jsonl")
    t0 = time.time()
    if stage == 1:
        set_determinism(cfg.training.stage1.seed, cfg.training.deterministic)
        system = DualWatermarkSystem(cfg)
        if cfg.attacks.surrogate_checkpoint:
            system.surrogate.load_state_dict(torch.load(cfg.attacks.surrogate_checkpoint, map_location="cpu"))
        else:
            system.surrogate = pretrain_surrogate(cfg.training.surrogate_steps, cfg.attacks.surrogate_latent,
                                                  cfg.copyright.working_size, lr=cfg.training.surrogate_lr,
                                                  seed=cfg.training.stage1.seed, log=logger)
        sched = train_copyright(cfg, system, logger, corpus)
        ckpt = capture(system, ["copyright", "surrogate"], schedule={"stage1": sched}, stages=[1])
    elif stage == 2:
        prev = _require(workdir, 1)
        set_determinism(cfg.training.stage2.seed, cfg.training.deterministic)
        system = DualWatermarkSystem(cfg)
        for name in ("copyright", "surrogate"):
            getattr(system, name).load_state_dict(prev.blobs[name])
        disc = train_localized(cfg, system, logger, corpus)
        ckpt = capture(system, ["transform", "localized"], discriminator=disc,
                       schedule={**prev.schedule, "stage2": {"steps": cfg.training.stage2.steps}}, stages=[1, 2])
        ckpt.blobs.update({k: prev.blobs[k] for k in ("copyright", "surrogate")})
    elif stage == 3:
        prev = _require(workdir, 2)
        set_determinism(cfg.training.stage3.seed, cfg.training.deterministic)
        system = restore(prev, cfg)
        trip_path = workdir / TRIPLET_FILE
        if trip_path.exists():
            triplets = torch.load(trip_path, weights_only=False)
        else:
            triplets = build_extractor_triplets(system, cfg.training.triplet_count,
                                                cfg.training.triplet_attacks, seed=cfg.training.stage3.seed)
            torch.save(triplets, trip_path)
        logger({"stage": 3, "event": "triplets", "count": len(triplets["mask"]), "seconds": time.time() - t0})
        train_extractor(cfg, system, triplets, logger)
        ckpt = capture(system, ["extractor"],
                       schedule={**prev.schedule, "stage3": {"steps": cfg.training.stage3.steps}}, stages=[1, 2, 3])
        ckpt.blobs.update({k: v for k, v in prev.blobs.items() if k != "extractor"})
    else:
        raise ValueError(f"unknown stage {stage}")
    ckpt.config, ckpt.config_hash = cfg.to_dict(), cfg.hash()
    ckpt.rng = {"torch": torch.get_rng_state()}
    ckpt.save(workdir / STAGE_FILES[stage])
    logger({"stage": stage, "event": "done", "seconds": time.time() - t0})
    return ckpt


def _require(workdir: Path, stage: int) -> Checkpoint:
    path = workdir / STAGE_FILES[stage]
    if not path.exists():
        raise FileNotFoundError(f"stage {stage + 1} needs the stage-{stage} checkpoint {path}")
    return Checkpoint.load(path)


def run_pipeline(cfg: Config, workdir: str | Path, stages=(1, 2, 3), force: bool = False,
                 logger: Optional[Callable] = None) -> Path:
    """Run the requested stages in order, skipping any whose checkpoint already exists."""
    workdir = Path(workdir)
    for stage in stages:
        if not force and (workdir / STAGE_FILES[stage]).exists():
            log.info("stage %d checkpoint present, skipping", stage)
            continue
        run_stage(cfg, stage, workdir, logger)
    return workdir / STAGE_FILES[max(stages)]
