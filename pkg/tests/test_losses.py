import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualmark.config import LossWeights, desk_profile, toy_profile
from dualmark.losses import (BCE_EPS, FeatureNet, PatchDiscriminator, boundary_band, compute_copyright_loss,
                             compute_extractor_loss, compute_localization_loss, gan_generator_loss,
                             perceptual_distance)


def _bce_scalar(p, t):
    p = min(max(p, BCE_EPS), 1 - BCE_EPS)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def test_copyright_loss_4bit_oracle():
    w_hat = torch.tensor([[0.9, 0.2, 0.6, 0.01]], dtype=torch.float64)
    w = torch.tensor([[1.0, 0.0, 0.0, 1.0]], dtype=torch.float64)
    con = torch.tensor([0.1, 0.4, 0.7, 0.3], dtype=torch.float64).view(1, 1, 2, 2)
    ori = torch.tensor([0.0, 0.5, 0.7, 0.1], dtype=torch.float64).view(1, 1, 2, 2)
    weights = LossWeights()
    for step, total in ((0, 100), (25, 100), (99, 100)):
        lam = weights.lam(step, total)
        bce = sum(_bce_scalar(p, t) for p, t in zip([0.9, 0.2, 0.6, 0.01], [1, 0, 0, 1])) / 4
        mse = (0.1 ** 2 + 0.1 ** 2 + 0 + 0.2 ** 2) / 4
        out = compute_copyright_loss(w_hat, w, con, ori, weights, step, total)
        assert abs(float(out["loss"]) - (bce + lam * mse)) < 1e-12
    # logits path agrees with the probability path
    logits = torch.log(w_hat / (1 - w_hat))
    a = compute_copyright_loss(logits, w, con, ori, weights, 3, 10, from_logits=True)
    b = compute_copyright_loss(w_hat, w, con, ori, weights, 3, 10)
    assert abs(float(a["loss"]) - float(b["loss"])) < 1e-9


def test_copyright_loss_perfect_bits():
    w = torch.tensor([[1.0, 0.0, 1.0, 1.0]])
    soft = w.clamp(BCE_EPS, 1 - BCE_EPS)
    img = torch.rand(1, 3, 8, 8)
    out = compute_copyright_loss(soft, w, img, img, LossWeights(), 0, 10)
    assert float(out["l2"]) == 0.0
    assert float(out["loss"]) <= -math.log(1 - 2 * BCE_EPS) + 1e-6


def test_copyright_loss_length_mismatch():
    with pytest.raises(ValueError):
        compute_copyright_loss(torch.rand(1, 4), torch.rand(1, 5), torch.rand(1, 3, 2, 2),
                               torch.rand(1, 3, 2, 2), LossWeights(), 0, 1)


def test_lambda_schedule_endpoints_and_monotone():
    weights = LossWeights()
    total = 1000
    vals = [weights.lam(s, total) for s in range(total)]
    assert vals[0] == 0.05 and vals[-1] == 27.5
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_paper_loss_weights_are_defaults():
    for cfg in (LossWeights(), desk_profile().losses):
        assert (cfg.lambda_start, cfg.lambda_end) == (0.05, 27.5)
        assert (cfg.alpha1, cfg.alpha2, cfg.alpha3) == (10, 10, 100)
        assert cfg.gamma == 20


# --------------------------------------------------------------------------- localization

def test_localization_loss_zero_on_identical():
    img, w = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    weights = LossWeights(alpha2=0)
    out = compute_localization_loss(w, w, img, img, weights, feature_net=FeatureNet())
    assert float(out["loss"]) == 0.0


def test_localization_loss_decomposes():
    torch.manual_seed(0)
    w_hat, w = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    con, ori = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    disc, feat = PatchDiscriminator(8), FeatureNet()
    weights = LossWeights()
    out = compute_localization_loss(w_hat, w, con, ori, weights, disc, feat)
    wm = ((w_hat - w) ** 2).mean()
    img = ((con - ori) ** 2).mean()
    adv = gan_generator_loss(disc, con)
    per = perceptual_distance(feat, con, ori)
    want = wm + 10 * img + 10 * adv + 100 * per
    assert torch.allclose(out["loss"], want, rtol=1e-6)


def test_localization_loss_requires_aux_networks():
    x = torch.rand(1, 3, 8, 8)
    with pytest.raises(ValueError):
        compute_localization_loss(x, x, x, x, LossWeights(), disc=None, feature_net=FeatureNet())
    with pytest.raises(ValueError):
        compute_localization_loss(x, x, x, x, LossWeights(alpha2=0), feature_net=None)


def test_feature_net_fixed():
    a, b = FeatureNet(), FeatureNet()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb) and not pa.requires_grad


# --------------------------------------------------------------------------- extractor loss

def _band_oracle(mask: np.ndarray, width: int) -> np.ndarray:
    h, w = mask.shape
    edge = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            nb = mask[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
            edge[y, x] = float(nb.min() != nb.max())
    band = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            band[y, x] = edge[max(0, y - width):y + width + 1, max(0, x - width):x + width + 1].max()
    return band


def test_extractor_loss_8x8_oracle():
    gt = np.zeros((8, 8))
    gt[2:5, 3:7] = 1
    pred = np.random.default_rng(0).uniform(0.05, 0.95, (8, 8))
    weights = LossWeights(edge_band=1)
    band = _band_oracle(gt, 1)
    terms = [[_bce_scalar(pred[y, x], gt[y, x]) for x in range(8)] for y in range(8)]
    main = sum(sum(r) for r in terms) / 64
    edge = sum(terms[y][x] for y in range(8) for x in range(8) if band[y, x]) / band.sum()
    out = compute_extractor_loss(torch.from_numpy(pred)[None, None], torch.from_numpy(gt)[None, None], weights)
    assert abs(float(out["bce"]) - main) < 1e-12
    assert abs(float(out["edge"]) - edge) < 1e-12
    assert abs(float(out["loss"]) - (main + 20 * edge)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), width=st.integers(0, 3))
def test_boundary_band_matches_oracle(seed, width):
    gt = (np.random.default_rng(seed).random((8, 8)) < 0.4).astype(np.float64)
    got = boundary_band(torch.from_numpy(gt)[None, None], width)[0, 0].numpy()
    np.testing.assert_array_equal(got, _band_oracle(gt, width))


def test_extractor_loss_perfect_prediction():
    gt = torch.zeros(1, 1, 8, 8)
    gt[..., 2:6, 2:6] = 1
    out = compute_extractor_loss(gt.clone(), gt, LossWeights())
    assert float(out["loss"]) < 1e-5


def test_extractor_loss_rejects_soft_truth():
    with pytest.raises(ValueError):
        compute_extractor_loss(torch.rand(1, 1, 4, 4), torch.full((1, 1, 4, 4), 0.5), LossWeights())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_losses_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(1, 1, 8, 8, generator=g)
    gt = (torch.rand(1, 1, 8, 8, generator=g) < 0.5).float()
    assert float(compute_extractor_loss(p, gt, LossWeights())["loss"]) >= 0
    bits = (torch.rand(1, 10, generator=g) < 0.5).float()
    img = torch.rand(1, 3, 4, 4, generator=g)
    assert float(compute_copyright_loss(torch.rand(1, 10, generator=g), bits, img, img * 0.9,
                                        LossWeights(), 0, 1)["loss"]) >= 0


def test_toy_profile_keeps_paper_weights_except_gan():
    lw = toy_profile().losses
    assert (lw.lambda_start, lw.lambda_end, lw.alpha1, lw.alpha3, lw.gamma) == (0.05, 27.5, 10, 100, 20)
