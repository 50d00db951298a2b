import numpy as np
import pytest
import torch

from dualmark.attacks import (REGISTRY, AttackBank, SurrogateAutoencoder, apply_degradation, branch_coin,
                              finite_difference_check, gradient_audit, jpeg, quant_tables, simulate_aigc_edit,
                              soft_round)
from dualmark.data import AttackSpec


@pytest.fixture(scope="module")
def bank():
    torch.manual_seed(0)
    return AttackBank(surrogate=SurrogateAutoencoder(latent=4, width=8).freeze())


def test_identity_returns_input():
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(apply_degradation(x, AttackSpec("identity")), x)
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    assert np.array_equal(apply_degradation(img, AttackSpec("identity")), img)


def test_gaussian_noise_statistics_sigma25():
    x = torch.full((1, 3, 128, 128), 0.5)
    y = apply_degradation(x, AttackSpec("gaussian_noise", {"sigma": 25}, seed=3))
    assert abs(float(y.mean()) - 0.5) <= 0.01
    assert abs(float(y.std()) - 25 / 255) <= 0.1 * 25 / 255


def test_jpeg_q100_near_lossless():
    x = torch.rand(2, 3, 32, 32)
    for mode in ("smooth", "hard"):
        # unit quantization steps leave at most a few grey levels of rounding error
        err = (jpeg(x, 100, mode) - x).abs()
        assert float(err.max()) <= 3 / 255 and float(err.mean()) <= 1 / 255


def test_jpeg_hard_mode_compresses():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 32, 32, generator=g)
    err70 = float((jpeg(x, 70, "hard") - x).abs().mean())
    err95 = float((jpeg(x, 95, "hard") - x).abs().mean())
    assert err70 > err95 > 0


def test_jpeg_handles_non_multiple_of_8():
    x = torch.rand(1, 3, 20, 12)
    assert jpeg(x, 80).shape == x.shape


def test_quant_tables_standard_points():
    assert quant_tables(50)[0, 0, 0] == 16
    assert torch.all(quant_tables(100) == 1)
    with pytest.raises(ValueError):
        quant_tables(0)


def test_soft_round_fixes_integers():
    k = torch.arange(-5, 6, dtype=torch.float64)
    assert torch.allclose(soft_round(k), k, atol=1e-12)
    x = torch.linspace(-3, 3, 601, dtype=torch.float64)
    # half-integers are fixed points of the smooth staircase
    assert float((soft_round(x) - torch.round(x)).abs().max()) <= 0.5 + 1e-12
    off_half = (x - x.floor() - 0.5).abs() > 0.05
    assert float((soft_round(x) - torch.round(x))[off_half].abs().max()) < 0.5


def test_seeded_attacks_bit_identical(bank):
    x = torch.rand(2, 3, 32, 32)
    orig = torch.rand(2, 3, 32, 32)
    specs = [AttackSpec("gaussian_noise", {"sigma": 7}, 5), AttackSpec("salt_pepper", {"density": 0.05}, 5),
             AttackSpec("jpeg", {"q": 70}, 1), AttackSpec("color_jitter", {"brightness": 1.3}, 2),
             AttackSpec("global_edit_surrogate", {}, 0), AttackSpec("partial_removal", {}, 9)]
    for spec in specs:
        a = apply_degradation(x, spec, bank, original=orig)
        b = apply_degradation(x, spec, bank, original=orig)
        assert torch.equal(a, b), spec
        assert a.shape == x.shape
    s1 = apply_degradation(x, AttackSpec("gaussian_noise", {"sigma": 7}, 5))
    s2 = apply_degradation(x, AttackSpec("gaussian_noise", {"sigma": 7}, 6))
    assert not torch.equal(s1, s2)


def test_salt_pepper_exact_count():
    x = torch.full((3, 3, 40, 50), 0.5)
    y = apply_degradation(x, AttackSpec("salt_pepper", {"density": 0.02}, 1))
    changed = (y != 0.5).any(dim=1).flatten(1).sum(1)
    assert torch.all((changed - round(0.02 * 2000)).abs() <= 1)


def test_color_jitter_brightness():
    x = torch.full((1, 3, 8, 8), 0.5)
    up = apply_degradation(x, AttackSpec("color_jitter", {"brightness": 1.3}))
    down = apply_degradation(x, AttackSpec("color_jitter", {"brightness": 0.7}))
    assert torch.allclose(up, torch.full_like(x, 0.65)) and torch.allclose(down, torch.full_like(x, 0.35))


def test_attack_errors(bank):
    x = torch.rand(1, 3, 8, 8)
    with pytest.raises(KeyError):
        apply_degradation(x, AttackSpec("blur"))
    with pytest.raises(ValueError):
        apply_degradation(x, AttackSpec("jpeg", {"q": 150}))
    with pytest.raises(ValueError):
        apply_degradation(x, AttackSpec("salt_pepper", {"density": 2}))
    with pytest.raises(RuntimeError):
        apply_degradation(x, AttackSpec("global_edit_surrogate"))
    with pytest.raises(ValueError):
        apply_degradation(x, AttackSpec("partial_removal"), bank)


def test_attack_spec_parse_roundtrip():
    spec = AttackSpec.parse("jpeg:q=70,seed=3")
    assert spec == AttackSpec("jpeg", {"q": 70}, 3)
    assert AttackSpec.parse(str(spec), seed=3) == spec
    assert AttackSpec.parse("gaussian_noise:sigma=2.5").params == {"sigma": 2.5}


def test_surrogate_is_frozen_and_distorts(bank):
    assert all(not p.requires_grad for p in bank.surrogate.parameters())
    x = torch.rand(1, 3, 32, 32)
    y = bank.surrogate(x)
    assert y.shape == x.shape and float((y - x).abs().mean()) > 0


# --------------------------------------------------------------------------- editing simulator

def test_branch_coin_frequency():
    hits = sum(branch_coin(s) == "global" for s in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


def _local_seed():
    return next(s for s in range(100) if branch_coin(s) == "local")


def _global_seed():
    return next(s for s in range(100) if branch_coin(s) == "global")


def test_local_branch_degenerate_masks(bank):
    con, ori = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    seed = _local_seed()
    ident = AttackSpec("identity")
    out0, br = simulate_aigc_edit(con, ori, seed, bank, ident, mask=torch.zeros(2, 1, 16, 16))
    out1, _ = simulate_aigc_edit(con, ori, seed, bank, ident, mask=torch.ones(2, 1, 16, 16))
    assert br == "local" and torch.equal(out0, con) and torch.equal(out1, ori)


def test_global_branch_uses_surrogate(bank):
    con, ori = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    out, br = simulate_aigc_edit(con, ori, _global_seed(), bank, AttackSpec("identity"))
    assert br == "global" and torch.equal(out, bank.surrogate(con))
    with pytest.raises(RuntimeError):
        simulate_aigc_edit(con, ori, _global_seed(), AttackBank(), AttackSpec("identity"))


def test_gradients_flow_through_both_branches(bank):
    for seed in (_local_seed(), _global_seed()):
        con = torch.rand(1, 3, 16, 16, requires_grad=True)
        out, _ = simulate_aigc_edit(con, torch.rand(1, 3, 16, 16), seed, bank, AttackSpec("jpeg", {"q": 75}))
        out.sum().backward()
        assert con.grad is not None and float(con.grad.abs().sum()) > 0


# --------------------------------------------------------------------------- gradient audit

def test_identity_gradient_exact():
    frac, bad = finite_difference_check(lambda x: x, torch.rand(1, 3, 8, 8), coords=64, rtol=1e-6)
    assert frac == 1.0 and not bad


def test_noise_gradient_is_one():
    x = torch.rand(1, 3, 8, 8, requires_grad=True)
    y = apply_degradation(x, AttackSpec("gaussian_noise", {"sigma": 10}, 3))
    y.sum().backward()
    assert torch.equal(x.grad, torch.ones_like(x))


def test_jpeg_audit_q70():
    rep = gradient_audit("jpeg", trials=2, size=16, params={"q": 70})
    assert rep.passed, str(rep)


@pytest.mark.parametrize("kind", [k for k, op in REGISTRY.items() if op.differentiable])
def test_every_differentiable_operator_passes_audit(kind, bank):
    rep = gradient_audit(kind, trials=2, size=16, bank=bank)
    assert rep.passed, f"{rep}; offending {rep.offending[:5]}"


def test_audit_reports_offending_coordinates():
    # a non-smooth function fails the audit and lists coordinates
    frac, bad = finite_difference_check(lambda x: torch.round(x * 1e6), torch.rand(1, 1, 4, 4), coords=16)
    assert frac < 0.95 and bad
