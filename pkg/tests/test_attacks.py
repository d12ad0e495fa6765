import pytest
import torch
import torch.nn as nn

from rcnas.arch import analog_teacher, materialize
from rcnas.attacks import (
    AdvBatch, AttackSpec, attack, perturb, register_external, registered_externals, unregister_external,
    validate, with_radius,
)


def linear_model(seed=0, classes=2, dim=3 * 4 * 4):
    g = torch.Generator().manual_seed(seed)
    lin = nn.Linear(dim, classes)
    with torch.no_grad():
        lin.weight.copy_(torch.randn(classes, dim, generator=g))
        lin.bias.zero_()
    return nn.Sequential(nn.Flatten(), lin)


def interior_batch(n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = 0.2 + 0.6 * torch.rand(n, 3, 4, 4, generator=g)
    y = torch.randint(0, 2, (n,), generator=g)
    return x, y


def test_spec_defaults_and_ids():
    assert AttackSpec.from_id("pgd20").steps == 20
    assert AttackSpec.from_id("cw40").loss == "cw_margin"
    assert AttackSpec.from_id("pgd").id == "pgd20"
    s = AttackSpec.from_id("fgsm")
    assert s.id == "fgsm" and s.step_size == pytest.approx(8 / 255 / 4)
    with pytest.raises(ValueError):
        AttackSpec.from_id("deepfool")
    with pytest.raises(ValueError):
        AttackSpec(kind="pgd", radius=-1)


def test_fgsm_matches_linear_closed_form():
    model = linear_model()
    x, y = interior_batch()
    eps = 0.05
    adv = perturb(model, x, y, AttackSpec(kind="fgsm", radius=eps))
    W = model[1].weight.detach()
    # for two classes the CE input gradient is p_other * (W_other - W_y)
    direction = torch.sign(W[1 - y] - W[y]).reshape(x.shape)
    expected = (x + eps * direction).clamp(0, 1)
    assert torch.equal(adv, expected)


@pytest.mark.parametrize("attack_id", ["fgsm", "pgd5", "cw5"])
def test_containment_on_boundary_pixels(attack_id):
    model = materialize(analog_teacher("WRN-16-4", 8)).eval()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(6, 3, 8, 8, generator=g).round()  # pixels sitting on 0 and 1
    y = torch.randint(0, 10, (6,), generator=g)
    spec = AttackSpec.from_id(attack_id)
    adv = perturb(model, x, y, spec, torch.Generator().manual_seed(0))
    assert (adv - x).abs().max() <= spec.radius + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


def test_pgd_is_reproducible_and_stronger_than_clean():
    model = linear_model(classes=2)
    x, y = interior_batch(32)
    spec = AttackSpec(kind="pgd", radius=0.1, steps=10)
    a = perturb(model, x, y, spec, torch.Generator().manual_seed(5))
    b = perturb(model, x, y, spec, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
    ce = nn.functional.cross_entropy
    assert ce(model(a), y) > ce(model(x), y)


def test_zero_radius_and_clean_are_identity():
    model = linear_model()
    x, y = interior_batch()
    assert torch.equal(perturb(model, x, y, AttackSpec(kind="pgd", radius=0.0)), x)
    assert torch.equal(perturb(model, x, y, AttackSpec(kind="clean")), x)


def test_success_mask_is_relative_to_clean_prediction():
    model = linear_model()
    x, y = interior_batch(16)
    out = attack(model, x, y, AttackSpec(kind="pgd", radius=0.3, steps=10), torch.Generator().manual_seed(0))
    with torch.no_grad():
        expect = model(out.inputs).argmax(1) != model(x).argmax(1)
    assert torch.equal(out.success_mask, expect)
    assert torch.allclose(out.deltas, out.inputs - x)


def test_attack_restores_training_mode():
    model = materialize(analog_teacher("WRN-16-4", 8))
    model.train()
    x = torch.rand(4, 3, 8, 8)
    attack(model, x, torch.zeros(4, dtype=torch.long), AttackSpec.from_id("fgsm"))
    assert model.training


def test_validate_rejects_escapes():
    x = torch.full((2, 3, 4, 4), 0.5)
    with pytest.raises(ValueError, match="batch index 1"):
        adv = x.clone()
        adv[1, 0, 0, 0] += 0.2
        validate(x, adv, 0.1)
    with pytest.raises(ValueError):
        validate(x, x + 0.6, 1.0)


def test_nonfinite_gradient_names_index():
    class Bad(nn.Module):
        def forward(self, x):
            z = x.flatten(1)[:, :2].clone()
            z[1] = z[1] * float("nan")
            return z

    x, y = interior_batch(3)
    with pytest.raises(FloatingPointError, match="batch index 1"):
        perturb(Bad(), x, y, AttackSpec(kind="fgsm", radius=0.1))


def test_external_registry():
    def shift(model, x, y, spec):
        return AdvBatch((x + spec.radius).clamp(0, 1), None, None)

    register_external("shift", shift)
    try:
        assert "shift" in registered_externals()
        x, y = interior_batch()
        adv = perturb(linear_model(), x, y, AttackSpec(kind="external:shift", radius=0.01))
        assert torch.allclose(adv, x + 0.01)
        register_external("escape", lambda m, x, y, s: x + 1.0)
        with pytest.raises(ValueError):
            perturb(linear_model(), x, y, AttackSpec(kind="external:escape", radius=0.01))
    finally:
        unregister_external("shift")
        unregister_external("escape")
    with pytest.raises(KeyError):
        perturb(linear_model(), x, y, AttackSpec(kind="external:shift"))


def test_with_radius_rescales_step():
    s = with_radius(AttackSpec.from_id("pgd20"), 0.1)
    assert s.radius == 0.1 and s.step_size == pytest.approx(0.025) and s.steps == 20
