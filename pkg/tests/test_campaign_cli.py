import json
import math

import numpy as np
import pytest
import yaml
from PIL import Image

from dualmark.campaign import Manifest, MetricReport, run_campaign
from dualmark.cli import main
from dualmark.data import AttackSpec, bits_to_hex, load_image, random_crops, save_image
from dualmark.system import load_system


@pytest.fixture
def ckpt(tiny_run):
    return str(tiny_run[1] / "stage3.pt")


@pytest.fixture
def image_file(tmp_path):
    p = tmp_path / "a.png"
    save_image(random_crops(1, 64, split="heldout", seed=2)[0], p)
    return p


def _kv(line: str) -> dict:
    return dict(item.split("=", 1) for item in line.split())


# --------------------------------------------------------------------------- campaign

def test_empty_manifest_gives_valid_header():
    rep = run_campaign(Manifest())
    assert rep.rows == [] and rep.header["tau"] == 0.5 and "auc_pooling" in rep.header
    assert rep.aggregate()["count"] == 0


def test_campaign_rows_and_aggregates(ckpt, tmp_path):
    imgs = list(random_crops(2, 64, split="heldout", seed=1))
    man = Manifest(imgs, ["a", "b"], [AttackSpec("identity"), AttackSpec.parse("gaussian_noise:sigma=10")],
                   checkpoint=ckpt, seed=4)
    rep = run_campaign(man)
    assert len(rep.rows) == 4 and all(r["error"] is None for r in rep.rows)
    for r in rep.rows:
        assert 0 <= r["f1"] <= 1 and 0 <= r["iou"] <= 1 and 0 <= r["bit_acc"] <= 1
        assert -1 <= r["ssim"] <= 1 and 0 <= r["psnr"] <= 100
        assert math.isnan(r["auc"]) or 0 <= r["auc"] <= 1
    agg = rep.aggregate()
    for k in ("f1", "bit_acc", "psnr", "baseline_f1"):
        assert agg[k] == pytest.approx(np.mean([r[k] for r in rep.rows]), abs=1e-12)
    # same tamper for every attack on one image
    a, b = rep.rows[0], rep.rows[1]
    assert a["coverage"] == b["coverage"] and a["edit"] == b["edit"]
    # deterministic and append-only
    again = run_campaign(man)
    assert [r["f1"] for r in again.rows] == [r["f1"] for r in rep.rows]
    out = tmp_path / "r.jsonl"
    rep.write(out)
    n1 = len(out.read_text().splitlines())
    again.write(out)
    lines = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(lines) == 2 * n1 and lines[0]["type"] == "header"
    assert "identity" in rep.table()


def test_campaign_records_per_sample_failures(ckpt):
    man = Manifest([np.zeros((64, 64, 3), np.float32)], ["z"], [AttackSpec("no_such_attack")], checkpoint=ckpt)
    rep = run_campaign(man)
    assert len(rep.rows) == 1 and "KeyError" in rep.rows[0]["error"]
    assert rep.aggregate()["failed"] == 1


def test_manifest_yaml(tmp_path, ckpt, image_file):
    path = tmp_path / "m.yaml"
    path.write_text(yaml.safe_dump({"images": [str(image_file)], "attacks": ["identity", "jpeg:q=70"],
                                    "checkpoint": ckpt, "tau": 0.4}))
    man = Manifest.load(path)
    assert len(man.images) == 1 and man.tau == 0.4 and str(man.attacks[1]) == "jpeg:q=70"
    path.write_text(yaml.safe_dump({"images": {"split": "heldout", "count": 3, "size": 64}}))
    assert len(Manifest.load(path).images) == 3


# --------------------------------------------------------------------------- cli

def test_cli_embed_extract_roundtrip(ckpt, image_file, tmp_path, capsys):
    payload = bits_to_hex(np.random.default_rng(0).integers(0, 2, 100))
    out = tmp_path / "c.png"
    assert main(["embed", "--checkpoint", ckpt, "--in", str(image_file), "--payload", payload,
                 "--out", str(out)]) == 0
    res = _kv(capsys.readouterr().out)
    assert res["payload"] == payload and float(res["psnr"]) > 0
    assert load_image(out).shape == (64, 64, 3)
    assert main(["extract", "--checkpoint", ckpt, "--in", str(out), "--payload", payload]) == 0
    res = _kv(capsys.readouterr().out)
    assert len(res["payload"]) == 25 and 0 <= float(res["bit_acc"]) <= 1


def test_cli_locate_emits_mask_and_sidecar(ckpt, image_file, tmp_path, capsys):
    art = tmp_path / "w.png"
    save_image(random_crops(1, 64, seed=9)[0], art)
    mask = tmp_path / "m.png"
    assert main(["locate", "--checkpoint", ckpt, "--artifact", str(art), "--received", str(image_file),
                 "--out", str(mask)]) == 0
    res = _kv(capsys.readouterr().out)
    png = np.asarray(Image.open(mask))
    assert png.shape == (64, 64) and set(np.unique(png)) <= {0, 255}
    side = np.load(res["sidecar"])
    assert side.shape == (64, 64) and side.dtype == np.float32
    np.testing.assert_array_equal(png == 255, side >= 0.5)
    # artifact decoded from the received image when not given
    assert main(["locate", "--checkpoint", ckpt, "--received", str(image_file), "--out", str(mask),
                 "--artifact-out", str(tmp_path / "a.npy")]) == 0
    assert np.load(tmp_path / "a.npy").shape == (64, 64, 3)


def test_cli_attack_reproducible(image_file, tmp_path, capsys):
    outs = []
    for name in ("d1.png", "d2.png"):
        assert main(["attack", "--in", str(image_file), "--spec", "jpeg:q=70", "--seed", "1",
                     "--out", str(tmp_path / name)]) == 0
        outs.append(np.asarray(Image.open(tmp_path / name)))
    assert np.array_equal(*outs)
    assert "attack=jpeg:q=70" in capsys.readouterr().out


def test_cli_errors_exit_nonzero(tmp_path, image_file, capsys, monkeypatch):
    monkeypatch.delenv("DUALMARK_CHECKPOINT", raising=False)
    assert main(["extract", "--in", str(image_file)]) == 1
    assert main(["attack", "--in", str(tmp_path / "none.png"), "--spec", "identity", "--out", "x.png"]) == 1
    assert main(["attack", "--in", str(image_file), "--spec", "jpeg:q=300", "--out", str(tmp_path / "x.png")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 3 and all(e.startswith("error: ") for e in err)


def test_cli_checkpoint_from_environment(ckpt, image_file, capsys, monkeypatch):
    monkeypatch.setenv("DUALMARK_CHECKPOINT", ckpt)
    assert main(["extract", "--in", str(image_file)]) == 0
    assert "payload=" in capsys.readouterr().out


def test_cli_evaluate_and_triplets(ckpt, image_file, tmp_path, capsys):
    man = tmp_path / "m.yaml"
    man.write_text(yaml.safe_dump({"images": [str(image_file)], "attacks": ["identity"], "checkpoint": ckpt}))
    assert main(["evaluate", "--manifest", str(man), "--out", str(tmp_path / "r.jsonl")]) == 0
    res = _kv(capsys.readouterr().out)
    assert res["count"] == "1" and res["failed"] == "0"
    assert main(["triplets", "--checkpoint", ckpt, "--count", "2", "--out", str(tmp_path / "t.pt")]) == 0
    assert _kv(capsys.readouterr().out)["count"] == "2"


def test_cli_train_smoke(tmp_path, capsys):
    from conftest import tiny_config
    from dualmark.config import dump_config

    cfg = tiny_config(steps=(2, 2, 2))
    cfg.training.triplet_count = 2
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    assert main(["train", "--config", str(path), "--workdir", str(tmp_path / "w")]) == 0
    res = _kv(capsys.readouterr().out)
    assert res["config_hash"] == cfg.hash()
    assert load_system(res["checkpoint"]).cfg.hash() == cfg.hash()
