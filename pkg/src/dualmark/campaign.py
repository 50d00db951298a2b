"""Evaluation campaigns over (image, attack) grids."""
from __future__ import annotations

import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .data import (AttackSpec, MaskSpec, batch_tensor, generate_random_mask, load_image, random_crops,
                   to_numpy)
from .extractor import residual_subtraction_baseline
from .metrics import bit_accuracy, compute_fidelity_metrics, compute_mask_metrics
from .system import DualWatermarkSystem, load_system
from .training import EDIT_KINDS, tamper_sample

log = logging.getLogger(__name__)

METRIC_KEYS = ("f1", "auc", "iou", "baseline_f1", "baseline_auc", "baseline_iou", "psnr", "ssim", "bit_acc")


@dataclass
class Manifest:
    images: list = field(default_factory=list)      # HxWx3 arrays
    ids: list = field(default_factory=list)
    attacks: list = field(default_factory=list)     # AttackSpec
    checkpoint: Optional[str] = None
    seed: int = 0
    tau: float = 0.5
    edits: tuple = EDIT_KINDS
    mask_coverage: tuple = (0.05, 0.35)

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        """YAML manifest.

        ``images`` is a list of file paths, or ``{split: heldout, count: N, size: 64}`` to draw
        crops from the bundled corpus; ``attacks`` are spec strings such as ``jpeg:q=70``.
        """
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        base = Path(path).parent
        images, ids = [], []
        src = d.get("images", [])
        if isinstance(src, dict):
            crops = random_crops(int(src.get("count", 16)), int(src.get("size", 64)),
                                 split=src.get("split", "heldout"), seed=int(src.get("seed", 0)))
            images = list(crops)
            ids = [f"{src.get('split', 'heldout')}-{i}" for i in range(len(crops))]
        else:
            for p in src:
                p = Path(p) if Path(p).is_absolute() else base / p
                images.append(load_image(p))
                ids.append(p.name)
        attacks = [AttackSpec.parse(a) for a in d.get("attacks", ["identity"])]
        ckpt = d.get("checkpoint")
        if ckpt is not None and not Path(ckpt).is_absolute():
            ckpt = str(base / ckpt)
        return cls(images, ids, attacks, ckpt, int(d.get("seed", 0)), float(d.get("tau", 0.5)),
                   tuple(d.get("edits", EDIT_KINDS)), tuple(d.get("mask_coverage", (0.05, 0.35))))


@dataclass
class MetricReport:
    header: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def aggregate(self, rows: Optional[Sequence[dict]] = None) -> dict:
        rows = self.rows if rows is None else rows
        ok = [r for r in rows if r.get("error") is None]
        out = {"count": len(rows), "failed": len(rows) - len(ok)}
        for k in METRIC_KEYS:
            vals = [r[k] for r in ok if k in r and r[k] is not None and not np.isnan(r[k])]
            out[k] = float(np.mean(vals)) if vals else None
        return out

    def by_attack(self) -> dict:
        groups: dict = {}
        for r in self.rows:
            groups.setdefault(r["attack"], []).append(r)
        return {k: self.aggregate(v) for k, v in groups.items()}

    def write(self, path: str | Path) -> None:
        """Append the report as JSON lines: header, one line per sample, then summaries."""
        with open(path, "a") as fh:
            fh.write(json.dumps({"type": "header", **self.header}) + "\n")
            for r in self.rows:
                fh.write(json.dumps({"type": "sample", **r}) + "\n")
            for attack, agg in self.by_attack().items():
                fh.write(json.dumps({"type": "summary", "attack": attack, **agg}) + "\n")
            fh.write(json.dumps({"type": "summary", "attack": "*", **self.aggregate()}) + "\n")

    def table(self) -> str:
        cols = ("count", "bit_acc", "f1", "auc", "iou", "baseline_f1", "psnr", "ssim")
        lines = ["attack".ljust(28) + "".join(c.rjust(12) for c in cols)]
        for attack, agg in {**self.by_attack(), "*": self.aggregate()}.items():
            cells = []
            for c in cols:
                v = agg.get(c)
                cells.append(("-" if v is None else (f"{v:d}" if isinstance(v, int) else f"{v:.4f}")).rjust(12))
            lines.append(attack[:28].ljust(28) + "".join(cells))
        return "\n".join(lines)


def evaluate_sample(system: DualWatermarkSystem, img: np.ndarray, attack: AttackSpec, seed: int,
                    tau: float = 0.5, edits=EDIT_KINDS, mask_spec: Optional[MaskSpec] = None,
                    donor: Optional[np.ndarray] = None) -> dict:
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    x = batch_tensor(img[None])
    bits = torch.from_numpy(rng.integers(0, 2, (1, system.payload_bits))).float()
    mask = generate_random_mask(h, w, mask_spec or MaskSpec(), int(rng.integers(2 ** 31 - 1)))
    edit = edits[int(rng.integers(len(edits)))]
    if donor is None:
        donor = random_crops(1, h, split="heldout", seed=int(rng.integers(2 ** 31 - 1)))[0] if h == w else img[::-1]
    res = tamper_sample(system, x, bits, torch.from_numpy(mask)[None, None], edit,
                        batch_tensor(np.ascontiguousarray(donor)[None]), attack)
    with torch.no_grad():
        soft = system.copyright.extract_scaled(res["received"])
        pred = system.extractor(res["artifact"], res["received"])
    source = system.watermark(w)
    base = residual_subtraction_baseline(res["artifact"], source, tau)
    m = compute_mask_metrics(to_numpy(pred), mask, tau)
    b = compute_mask_metrics(to_numpy(base), mask, tau)
    fid = compute_fidelity_metrics(to_numpy(res["container"]), img)
    return {"edit": edit, "coverage": float(mask.mean()), **m,
            "baseline_f1": b["f1"], "baseline_auc": b["auc"], "baseline_iou": b["iou"],
            **fid, "bit_acc": bit_accuracy(soft[0], bits[0])}


def run_campaign(manifest: Manifest, system: Optional[DualWatermarkSystem] = None) -> MetricReport:
    """Every (image, attack) pair; per-sample failures are recorded and the campaign continues."""
    header = {"tau": manifest.tau, "auc_pooling": "pixel-level per image, then mean over images",
              "checkpoint": manifest.checkpoint, "seed": manifest.seed,
              "attacks": [str(a) for a in manifest.attacks], "images": len(manifest.images)}
    report = MetricReport(header)
    if not manifest.images or not manifest.attacks:
        return report
    if system is None:
        system = load_system(manifest.checkpoint)
    spec = MaskSpec(tuple(manifest.mask_coverage))
    for i, (img, iid) in enumerate(zip(manifest.images, manifest.ids)):
        for j, attack in enumerate(manifest.attacks):
            # same payload, mask and edit for every attack on an image
            seed = manifest.seed * 1_000_003 + i
            row = {"image": iid, "attack": str(attack), "seed": seed, "error": None}
            try:
                row.update(evaluate_sample(system, img, attack, seed, manifest.tau, manifest.edits, spec))
            except Exception as exc:  # recorded per sample
                row["error"] = f"{type(exc).__name__}: {exc}"
                log.debug(traceback.format_exc())
            report.rows.append(row)
    return report
