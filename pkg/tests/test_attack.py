import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from exitdoor.attack import AttackConfig, backdoor_loss, badnets_baseline, combined_loss, inject_backdoor, stealth_loss
from exitdoor.datasets import LabeledImageSet
from exitdoor.evaluate import compute_asr
from exitdoor.models import TrainSpec, build_backbone, checksum
from exitdoor.multiexit import attach_ics
from exitdoor.trigger import make_checkerboard_trigger


def scalar_ce(row, y):
    """Cross-entropy of one logit row using plain Python floats."""
    row = [float(v) for v in row]
    m = max(row)
    return -(row[y] - m) + math.log(sum(math.exp(v - m) for v in row))


def oracle_sum(model, x, y, exits):
    """Mean over samples of the summed per-exit cross-entropies."""
    with torch.no_grad():
        logits = model.exit_logits(x)
    total = 0.0
    for i in range(len(x)):
        total += sum(scalar_ce(logits[l][i], int(y[i])) for l in exits)
    return total / len(x)


@pytest.fixture
def toy2exit(tiny):
    # two blocks, IC at block 1; p = 0.5 puts the IC in L_B and the head in L_S
    return attach_ics(tiny(num_blocks=2, num_classes=3), [1], seed=0).eval()


def batch(n=6, k=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 32, 32, generator=g), torch.randint(k, (n,), generator=g)


def test_two_exit_losses_match_scalar_oracle(toy2exit):
    x, y = batch()
    xc, yc = batch(seed=1)
    cfg = AttackConfig(exit_layer_ratio=0.5)
    lb = backdoor_loss(toy2exit, x, y, 0.5).item()
    ls = stealth_loss(toy2exit, xc, yc, 0.5).item()
    assert lb == pytest.approx(oracle_sum(toy2exit, x, y, [1]), abs=1e-6)
    assert ls == pytest.approx(oracle_sum(toy2exit, xc, yc, [toy2exit.final_index]), abs=1e-6)
    total = combined_loss(toy2exit, (x, y), (xc, yc), cfg).item()
    assert total == pytest.approx(lb + ls, abs=1e-6)


def test_stealth_covers_ics_beyond_n_and_head(tiny):
    model = attach_ics(tiny(num_blocks=5, num_classes=3), [1, 2, 3, 4, 5], seed=1).eval()
    x, y = batch(n=5)
    # floor(0.5 * 5) = 2: exits 1, 2 go to L_B; 3, 4, 5 and the head to L_S
    assert backdoor_loss(model, x, y, 0.5).item() == pytest.approx(oracle_sum(model, x, y, [1, 2]), abs=1e-6)
    assert stealth_loss(model, x, y, 0.5).item() == pytest.approx(
        oracle_sum(model, x, y, [3, 4, 5, model.final_index]), abs=1e-6)


def _zero_exit_logits(model):
    with torch.no_grad():
        for ic in model.ics.values():
            ic.fc.weight.zero_()
            ic.fc.bias.zero_()
        model.backbone.head[2].weight.zero_()
        model.backbone.head[2].bias.zero_()


def test_uniform_logits_give_n_ln_k(tiny):
    k = 3
    model = attach_ics(tiny(num_blocks=5, num_classes=k), [1, 2, 3, 4, 5], seed=0).eval()
    _zero_exit_logits(model)
    x, y = batch(n=4)
    n = math.floor(0.8 * 5)
    assert backdoor_loss(model, x, y, 0.8).item() == pytest.approx(n * math.log(k), abs=1e-6)
    # exit 5 and the head remain for L_S
    assert stealth_loss(model, x, y, 0.8).item() == pytest.approx(2 * math.log(k), abs=1e-6)


def test_stealth_with_no_ic_beyond_n_is_head_only(tiny):
    model = attach_ics(tiny(num_blocks=5, num_classes=3), [1, 2, 3, 4], seed=0).eval()
    x, y = batch(n=4)
    assert stealth_loss(model, x, y, 0.8).item() == pytest.approx(
        oracle_sum(model, x, y, [model.final_index]), abs=1e-6)


def test_one_hot_logits_give_near_zero_backdoor_loss(tiny):
    model = attach_ics(tiny(num_blocks=2, num_classes=3), [1]).eval()
    with torch.no_grad():
        model.ics["1"].fc.weight.zero_()
        model.ics["1"].fc.bias.copy_(torch.tensor([50.0, 0.0, 0.0]))
    x, _ = batch()
    assert backdoor_loss(model, x, torch.zeros(len(x), dtype=torch.long), 0.5).item() < 1e-12


def test_missing_ic_rejected(tiny):
    model = attach_ics(tiny(num_blocks=5, num_classes=3), [1, 3], seed=0)
    x, y = batch()
    with pytest.raises(ValueError, match="missing"):
        backdoor_loss(model, x, y, 0.8)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 5.0), st.integers(0, 100))
def test_combined_is_lb_plus_lambda_ls(lam, seed):
    from conftest import tiny_backbone

    model = attach_ics(tiny_backbone(num_blocks=2), [1], seed=seed).eval()
    p, c = batch(seed=seed), batch(seed=seed + 1)
    cfg = AttackConfig(exit_layer_ratio=0.5, stealth_weight=lam)
    total, lb, ls = combined_loss(model, p, c, cfg, parts=True)
    a = backdoor_loss(model, *p, 0.5).item()
    b = stealth_loss(model, *c, 0.5).item()
    assert lb.item() == pytest.approx(a, abs=1e-6)
    expected = a if lam == 0 else a + lam * b
    assert total.item() == pytest.approx(expected, rel=1e-6, abs=1e-6)


def test_lambda_zero_ignores_clean_batch(toy2exit):
    cfg = AttackConfig(exit_layer_ratio=0.5, stealth_weight=0.0)
    p = batch()
    one = combined_loss(toy2exit, p, batch(seed=1), cfg).item()
    other = combined_loss(toy2exit, p, (torch.rand(6, 3, 32, 32), torch.randint(3, (6,))), cfg).item()
    assert one == other == backdoor_loss(toy2exit, *p, 0.5).item()


def test_combined_loss_gradient_matches_finite_difference(toy2exit):
    model = toy2exit.double()
    x, y = batch(n=4)
    xc, yc = batch(n=4, seed=3)
    x, xc = x.double(), xc.double()
    cfg = AttackConfig(exit_layer_ratio=0.5, stealth_weight=1.0)
    param = model.backbone.blocks[0][0].weight
    model.zero_grad()
    combined_loss(model, (x, y), (xc, yc), cfg).backward()
    analytic = param.grad.detach().clone()
    gen = torch.Generator().manual_seed(0)
    flat = param.detach().view(-1)
    eps = 1e-6
    for i in torch.randint(flat.numel(), (8,), generator=gen).tolist():
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = combined_loss(model, (x, y), (xc, yc), cfg).item()
            flat[i] = orig - eps
            down = combined_loss(model, (x, y), (xc, yc), cfg).item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic.view(-1)[i].item()
        assert abs(numeric - a) <= 1e-3 * max(abs(a), abs(numeric), 1e-8)


@pytest.mark.parametrize("kwargs", [
    {"exit_layer_ratio": 0.0}, {"exit_layer_ratio": 1.0}, {"stealth_weight": -1.0}, {"ic_epochs": 0},
    {"inject_epochs": 0}, {"ic_lr": 0.0}, {"inject_lr": -1.0}, {"poison_fraction": 0.0}, {"optimizer": "rmsprop"},
])
def test_attack_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


@pytest.fixture(scope="module")
def injected(blobs):
    clean = build_backbone("vgg-mini", 2, seed=0)
    cfg = AttackConfig(ic_epochs=3, inject_epochs=3, batch_size=32, target_label=1,
                       trigger=make_checkerboard_trigger(7, (3, 32, 32)))
    before = checksum(clean)
    model, record = inject_backdoor(clean, blobs, cfg)
    return clean, before, model, record


def test_injection_log_and_frozen_ics(injected):
    clean, before, model, record = injected
    assert checksum(clean) == before  # input backbone left alone
    assert record["num_attack_ics"] == 8
    epochs = record["injection"]
    assert [e["epoch"] for e in epochs] == [1, 2, 3]
    assert len({e["ic_checksum"] for e in epochs}) == 1
    for e in epochs:
        assert {"loss", "loss_backdoor", "loss_stealth", "lr"} <= set(e)
        assert e["loss"] == pytest.approx(e["loss_backdoor"] + e["loss_stealth"], rel=1e-5)


def test_injection_preserves_architecture(injected):
    clean, _, model, _ = injected
    assert (model.arch_name, model.num_blocks, model.num_classes) == (clean.arch_name, clean.num_blocks,
                                                                     clean.num_classes)
    a, b = clean.state_dict(), model.state_dict()
    assert a.keys() == b.keys() and all(a[k].shape == b[k].shape for k in a)
    assert not hasattr(model, "ics")
    assert checksum(model) != checksum(clean)


def test_injection_needs_one_batch(blobs):
    small = blobs.take(range(10))
    with pytest.raises(ValueError, match="fewer than one batch"):
        inject_backdoor(build_backbone("vgg-mini", 2), small, AttackConfig(batch_size=32))


def test_badnets_baseline_implants_vanilla_backdoor(blobs):
    trigger = make_checkerboard_trigger(7, (3, 32, 32))
    cfg = AttackConfig(poison_fraction=0.3, target_label=0, trigger=trigger)
    model = badnets_baseline(build_backbone("vgg-mini", 2, seed=0), blobs, cfg,
                             TrainSpec(epochs=15, batch_size=16, seed=0))
    assert compute_asr(model, blobs, trigger, 0) >= 0.9
