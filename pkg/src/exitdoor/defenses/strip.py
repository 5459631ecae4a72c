"""Input-superimposition entropy test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..multiexit import ExitPolicy, MultiExitModel
from .verdict import DefenseVerdict


@dataclass
class StripConfig:
    overlays: int = 64
    alpha: float = 0.5
    clean_percentile: float = 1.0
    # share of triggered inputs that must fall under the clean cutoff to flag
    flag_fraction: float = 0.5
    batch_size: int = 512
    seed: int = 0


@torch.no_grad()
def _probabilities(model, x, policy: ExitPolicy | None):
    if isinstance(model, MultiExitModel):
        policy = policy or ExitPolicy.disabled()
        logits = model.exit_logits(x)
        if not policy.enabled:
            return F.softmax(logits[model.final_index], 1)
        # probabilities of the exit each blended input actually leaves through
        probs = F.softmax(logits[model.final_index], 1)
        pending = torch.ones(len(x), dtype=torch.bool)
        for l in model.locations:
            p = F.softmax(logits[l], 1)
            take = pending & (p.max(1).values > policy.threshold)
            probs[take] = p[take]
            pending &= ~take
        return probs
    return F.softmax(model(x), 1)


@torch.no_grad()
def strip_entropies(model, samples, overlay_pool, config: StripConfig | None = None,
                    policy: ExitPolicy | None = None) -> np.ndarray:
    """Mean base-2 prediction entropy of each sample blended with random overlays."""
    cfg = config or StripConfig()
    samples = torch.as_tensor(samples, dtype=torch.float32)
    pool = torch.as_tensor(overlay_pool, dtype=torch.float32)
    if len(samples) == 0 or len(pool) == 0:
        raise ValueError("STRIP needs non-empty sample and overlay pools")
    model.eval()
    gen = torch.Generator().manual_seed(cfg.seed)
    picks = torch.randint(len(pool), (len(samples), cfg.overlays), generator=gen)
    out = np.empty(len(samples))
    per_chunk = max(1, cfg.batch_size // cfg.overlays)
    for start in range(0, len(samples), per_chunk):
        x = samples[start:start + per_chunk]
        blended = cfg.alpha * x[:, None] + (1 - cfg.alpha) * pool[picks[start:start + per_chunk]]
        probs = _probabilities(model, blended.flatten(0, 1), policy).clamp_min(1e-12)
        entropy = -(probs * torch.log2(probs)).sum(1).view(len(x), cfg.overlays)
        out[start:start + len(x)] = entropy.mean(1).double().numpy()
    return out


def strip_detect(model, clean_samples, triggered_samples, overlay_pool, config: StripConfig | None = None,
                 policy: ExitPolicy | None = None):
    """Returns ``(clean_entropies, triggered_entropies, verdict)``.

    The cutoff is the ``clean_percentile``-th percentile of clean entropies; the
    model is flagged when at least ``flag_fraction`` of the triggered inputs fall
    below it. The verdict statistic is that fraction.
    """
    cfg = config or StripConfig()
    clean = strip_entropies(model, clean_samples, overlay_pool, cfg, policy)
    triggered = strip_entropies(model, triggered_samples, overlay_pool, cfg, policy)
    cutoff = float(np.percentile(clean, cfg.clean_percentile))
    below = float(np.mean(triggered < cutoff))
    verdict = DefenseVerdict(
        method="strip",
        statistic=below,
        threshold=cfg.flag_fraction,
        artifacts={"cutoff": cutoff, "clean_median": float(np.median(clean)),
                   "triggered_median": float(np.median(triggered))},
    )
    return clean, triggered, verdict
