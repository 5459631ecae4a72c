import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from exitdoor.datasets import LabeledImageSet
from exitdoor.defenses import (DFTNDConfig, DefenseVerdict, NeuralCleanseConfig, StripConfig, UnlearnConfig,
                               anomaly_index, df_tnd, finetune, neural_cleanse, strip_detect, strip_entropies,
                               unlearn)
from exitdoor.defenses.removal import worst_case_perturbation
from exitdoor.models import build_backbone, checksum


class CornerBackdoor(nn.Module):
    """Classifies by mean colour; a bright bottom-right 4x4 patch forces class 0."""

    num_classes = 4

    def __init__(self, strength: float = 60.0):
        super().__init__()
        self.colour = nn.Linear(3, 4)
        with torch.no_grad():
            self.colour.weight.copy_(torch.tensor([[0, 0, 0], [8, 0, 0], [0, 8, 0], [0, 0, 8.0]]))
            self.colour.bias.copy_(torch.tensor([2.0, -2, -2, -2]))
        self.strength = strength

    def forward(self, x):
        logits = self.colour(x.mean((2, 3)))
        corner = x[:, :, -4:, -4:].mean((1, 2, 3))
        bonus = self.strength * torch.relu(corner - 0.5)
        return logits + torch.nn.functional.one_hot(torch.zeros(len(x), dtype=torch.long), 4) * bonus[:, None]


def coloured_images(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(1, 4, n)
    x = rng.uniform(0.0, 0.2, (n, 3, 32, 32)).astype(np.float32)
    for i, y in enumerate(labels):
        x[i, y - 1] += 0.6
    return LabeledImageSet(x, labels, 4, "coloured")


# ---------------------------------------------------------------- anomaly index

def test_anomaly_index_hand_computed():
    norms = [10.0, 50.0, 52.0, 48.0, 55.0]
    median = 50.0
    mad = 1.4826 * np.median(np.abs(np.array(norms) - median))  # deviations 40,0,2,2,5 -> 2
    index, low = anomaly_index(norms)
    assert low == 0
    assert index == pytest.approx((median - 10.0) / mad, rel=1e-12)


def test_anomaly_index_zero_when_all_equal():
    assert anomaly_index([3.0] * 6) == (0.0, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.5, 1e3), min_size=3, max_size=12),
       st.floats(0.1, 10.0), st.floats(-100.0, 100.0))
def test_anomaly_index_is_scale_and_shift_invariant(norms, scale, shift):
    a, low_a = anomaly_index(norms)
    b, low_b = anomaly_index([scale * n + shift for n in norms])
    assert low_a == low_b or norms[low_a] == norms[low_b]
    if a < 1e6:
        assert b == pytest.approx(a, rel=1e-6, abs=1e-6)


# ---------------------------------------------------------------- STRIP

def test_strip_entropy_matches_loop_oracle():
    torch.manual_seed(0)
    model = nn.Sequential(nn.Flatten(), nn.Linear(3 * 8 * 8, 5)).eval()
    samples = torch.rand(6, 3, 8, 8)
    pool = torch.rand(9, 3, 8, 8)
    cfg = StripConfig(overlays=4, alpha=0.6, batch_size=8, seed=3)
    got = strip_entropies(model, samples, pool, cfg)
    picks = torch.randint(len(pool), (len(samples), cfg.overlays), generator=torch.Generator().manual_seed(3))
    for i in range(len(samples)):
        vals = []
        for j in picks[i]:
            with torch.no_grad():
                p = torch.softmax(model((0.6 * samples[i] + 0.4 * pool[j])[None]), 1)[0].double()
            vals.append(-sum(float(q) * math.log2(float(q)) for q in p))
        assert got[i] == pytest.approx(np.mean(vals), abs=1e-5)


def test_strip_entropy_bounds():
    x = torch.rand(5, 3, 8, 8)

    class Fixed(nn.Module):
        def __init__(self, logits):
            super().__init__()
            self.logits = logits

        def forward(self, x):
            return self.logits.expand(len(x), -1)

    confident = Fixed(torch.tensor([[100.0, 0, 0, 0]]))
    uniform = Fixed(torch.zeros(1, 4))
    assert np.allclose(strip_entropies(confident, x, x, StripConfig(overlays=3)), 0.0, atol=1e-6)
    assert np.allclose(strip_entropies(uniform, x, x, StripConfig(overlays=3)), 2.0, atol=1e-6)


def test_strip_rejects_empty_pools():
    model = nn.Sequential(nn.Flatten(), nn.Linear(3 * 8 * 8, 2))
    with pytest.raises(ValueError):
        strip_entropies(model, torch.rand(0, 3, 8, 8), torch.rand(2, 3, 8, 8))


def test_strip_flags_planted_backdoor_and_not_clean_inputs():
    model = CornerBackdoor().eval()
    data = coloured_images(80)
    triggered = data.images.copy()
    triggered[:, :, -4:, -4:] = 1.0
    cfg = StripConfig(overlays=16, alpha=0.7)
    clean_e, trig_e, verdict = strip_detect(model, data.images[:40], triggered[:40], data.images[40:], cfg)
    assert verdict.method == "strip" and verdict.flagged
    assert np.median(trig_e) < np.median(clean_e)
    # clean inputs never beat their own cutoff in bulk
    _, _, control = strip_detect(model, data.images[:40], data.images[:40], data.images[40:], cfg)
    assert not control.flagged


# ---------------------------------------------------------------- DF-TND

def test_df_tnd_leaves_model_untouched_and_scores_every_class():
    model = build_backbone("vgg-mini", 10, seed=3).eval()
    before = checksum(model)
    verdict = df_tnd(model, DFTNDConfig(seeds=2, steps=5))
    assert checksum(model) == before
    assert all(p.requires_grad for p in model.parameters())
    assert sorted(verdict.per_class_scores) == list(range(10))
    assert verdict.statistic == max(verdict.per_class_scores.values())
    assert verdict.per_class_scores[verdict.suspect_class] == verdict.statistic


def test_df_tnd_random_model_not_flagged():
    model = build_backbone("resnet-mini", 10, seed=0).eval()
    verdict = df_tnd(model, DFTNDConfig(seeds=4, steps=30))
    assert not verdict.flagged
    assert verdict.statistic < 100.0


def test_df_tnd_is_deterministic():
    model = build_backbone("vgg-mini", 4, seed=1).eval()
    a = df_tnd(model, DFTNDConfig(seeds=2, steps=5, seed=7))
    b = df_tnd(model, DFTNDConfig(seeds=2, steps=5, seed=7))
    assert a.per_class_scores == b.per_class_scores


# ---------------------------------------------------------------- Neural Cleanse

def test_neural_cleanse_finds_planted_corner_trigger():
    model = CornerBackdoor().eval()
    verdict = neural_cleanse(model, coloured_images(64), NeuralCleanseConfig(steps=400, batch_size=32,
                                                                            early_stop_patience=20))
    assert verdict.flagged
    assert verdict.suspect_class == 0
    assert verdict.per_class_scores[0] < min(v for k, v in verdict.per_class_scores.items() if k)


def test_neural_cleanse_needs_data():
    with pytest.raises(ValueError):
        neural_cleanse(CornerBackdoor(), LabeledImageSet(np.zeros((0, 3, 32, 32), np.float32),
                                                        np.zeros(0, np.int64), 4))


# ---------------------------------------------------------------- removal

def test_zero_epoch_removers_are_identity_copies():
    model = build_backbone("vgg-mini", 4, seed=0).eval()
    data = coloured_images(16)
    for repaired in (unlearn(model, data, 0), finetune(model, data, 0)):
        assert repaired is not model
        assert checksum(repaired) == checksum(model)


def test_removers_do_not_mutate_input_model():
    model = build_backbone("vgg-mini", 4, seed=0).eval()
    before = checksum(model)
    data = coloured_images(16)
    unlearn(model, data, 1, UnlearnConfig(batch_size=8, inner_steps=1))
    finetune(model, data, 1, batch_size=8)
    assert checksum(model) == before


def test_worst_case_perturbation_respects_bound():
    model = build_backbone("vgg-mini", 4, seed=0).eval()
    x, y = coloured_images(8).tensors()
    cfg = UnlearnConfig(inner_steps=4, inner_lr=1.0, max_norm=2.5)
    delta = worst_case_perturbation(model, x, y, cfg)
    assert delta.shape == x.shape[1:]
    assert delta.norm().item() <= 2.5 + 1e-4
    assert not delta.requires_grad


# ---------------------------------------------------------------- verdicts

@pytest.mark.parametrize("statistic,threshold,direction,flagged", [
    (2.0, 2.0, "above", True), (1.99, 2.0, "above", False),
    (0.1, 0.5, "below", True), (0.5, 0.5, "below", False),
])
def test_verdict_direction(statistic, threshold, direction, flagged):
    assert DefenseVerdict("m", statistic, threshold, direction).flagged is flagged


def test_verdict_rejects_bad_input():
    with pytest.raises(ValueError):
        DefenseVerdict("m", float("nan"), 1.0)
    with pytest.raises(ValueError):
        DefenseVerdict("m", 1.0, 1.0, direction="sideways")


def test_verdict_dict_is_json_ready():
    d = DefenseVerdict("m", 3.0, 2.0, per_class_scores={0: 1.0, 3: 2.0}, suspect_class=0,
                       artifacts={"big": np.zeros(3)}).to_dict()
    assert "artifacts" not in d
    assert d["per_class_scores"] == {"0": 1.0, "3": 2.0}
    assert d["flagged"] is True
