"""Command-line entry point: ``dualmark <command> ...``.

Each command prints one machine-readable ``key=value`` line on success and exits 0; on any
failure it prints a one-line diagnostic to stderr and exits 1.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

DEFAULT_CKPT_ENV = "DUALMARK_CHECKPOINT"


def _system(args):
    from .system import load_system

    path = args.checkpoint or os.environ.get(DEFAULT_CKPT_ENV)
    if not path:
        raise FileNotFoundError(f"no checkpoint: pass --checkpoint or set {DEFAULT_CKPT_ENV}")
    return load_system(path)


def _kv(**items) -> str:
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in items.items())


def cmd_embed(args):
    from .data import batch_tensor, hex_to_bits, load_image, save_image, to_numpy
    from .metrics import compute_fidelity_metrics

    system = _system(args)
    img = load_image(args.inp)
    bits = torch.from_numpy(hex_to_bits(args.payload, system.payload_bits)).float()[None]
    with torch.no_grad():
        con, _ = system.embed(batch_tensor(img[None]), bits)
    out = to_numpy(con)
    save_image(out, args.out)
    fid = compute_fidelity_metrics(np.clip(out, 0, 1), img)
    return _kv(payload=args.payload.lower(), out=args.out, **fid)


def cmd_extract(args):
    from .data import batch_tensor, bits_to_hex, hex_to_bits, load_image, round_soft_bits
    from .metrics import bit_accuracy

    system = _system(args)
    img = batch_tensor(load_image(args.inp)[None])
    with torch.no_grad():
        soft = system.copyright.extract_scaled(img)[0]
    bits = round_soft_bits(soft)
    items = {"payload": bits_to_hex(bits)}
    if args.payload:
        items["bit_acc"] = bit_accuracy(bits, hex_to_bits(args.payload, system.payload_bits))
    return _kv(**items)


def _load_artifact(path: str) -> np.ndarray:
    from .data import load_image

    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    return load_image(path)


def cmd_locate(args):
    from .data import batch_tensor, load_image, save_mask, to_numpy

    system = _system(args)
    received = batch_tensor(load_image(args.received)[None])
    with torch.no_grad():
        if args.artifact:
            artifact = batch_tensor(_load_artifact(args.artifact)[None])
        else:
            artifact, _ = system.reveal_artifact(received)
        mask = to_numpy(system.extractor(artifact, received))
    save_mask(mask >= args.tau, args.out)
    sidecar = str(Path(args.out).with_suffix(".npy"))
    np.save(sidecar, mask.astype(np.float32))
    if args.artifact_out:
        np.save(args.artifact_out, to_numpy(artifact).astype(np.float32))
    return _kv(mask=args.out, sidecar=sidecar, coverage=float((mask >= args.tau).mean()), tau=args.tau)


def cmd_attack(args):
    from .attacks import apply_degradation
    from .data import AttackSpec, load_image, save_image

    spec = AttackSpec.parse(args.spec, seed=args.seed)
    bank = _system(args).bank() if spec.kind == "global_edit_surrogate" else None
    original = load_image(args.original) if args.original else None
    out = apply_degradation(load_image(args.inp), spec, bank=bank, original=original)
    save_image(out, args.out)
    return _kv(attack=str(spec), seed=spec.seed, out=args.out)


def cmd_train(args):
    from .config import load_config
    from .training import STAGE_FILES, run_pipeline

    cfg = load_config(args.config, profile=args.profile)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    run_pipeline(cfg, args.workdir, stages, force=args.force)
    return _kv(checkpoint=str(Path(args.workdir) / STAGE_FILES[max(stages)]), config_hash=cfg.hash())


def cmd_evaluate(args):
    from .campaign import Manifest, run_campaign

    manifest = Manifest.load(args.manifest)
    if args.checkpoint:
        manifest.checkpoint = args.checkpoint
    report = run_campaign(manifest)
    if args.out:
        report.write(args.out)
    print(report.table(), file=sys.stderr)
    agg = report.aggregate()
    return _kv(**{k: agg[k] for k in ("count", "failed", "bit_acc", "f1", "auc", "baseline_f1") if agg.get(k) is not None})


def cmd_triplets(args):
    from .training import build_extractor_triplets

    system = _system(args)
    attacks = args.attacks.split(",") if args.attacks else system.cfg.training.triplet_attacks
    trip = build_extractor_triplets(system, args.count, attacks, seed=args.seed)
    torch.save(trip, args.out)
    return _kv(count=len(trip["mask"]), out=args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualmark", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--checkpoint", help=f"checkpoint file (default: ${DEFAULT_CKPT_ENV})")
        return sp

    sp = add("embed", cmd_embed, "embed both watermarks into an image")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--payload", required=True, help="payload as hex")
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "recover the bit payload")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--payload", help="reference payload; reports bit accuracy")

    sp = add("locate", cmd_locate, "predict the tamper mask")
    sp.add_argument("--received", required=True)
    sp.add_argument("--artifact", help="artifact map (.npy float or .png); decoded from --received if omitted")
    sp.add_argument("--out", required=True, help="mask PNG; a float .npy sidecar is written beside it")
    sp.add_argument("--artifact-out", help="also save the artifact map as .npy")
    sp.add_argument("--tau", type=float, default=0.5)

    sp = add("attack", cmd_attack, "apply one degradation")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--spec", required=True, help="e.g. jpeg:q=70 or gaussian_noise:sigma=10")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--original", help="original image (partial_removal)")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "run training stages")
    sp.add_argument("--config")
    sp.add_argument("--profile", default="toy", choices=("desk", "toy", "paper"))
    sp.add_argument("--stage", default="all", choices=("1", "2", "3", "all"))
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--force", action="store_true")

    sp = add("evaluate", cmd_evaluate, "run an evaluation campaign")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="append JSON-lines report here")

    sp = add("triplets", cmd_triplets, "synthesize extractor training triplets")
    sp.add_argument("--count", type=int, default=2000)
    sp.add_argument("--attacks", help="comma-separated attack kinds")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        print(args.fn(args))
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
