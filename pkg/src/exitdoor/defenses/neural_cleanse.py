"""Trigger reverse engineering per class with a median-absolute-deviation outlier test."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..datasets import LabeledImageSet, subsample
from ..models import Backbone, freeze
from .verdict import DefenseVerdict

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826


@dataclass
class NeuralCleanseConfig:
    steps: int = 800
    batch_size: int = 64
    lr: float = 0.1
    init_cost: float = 1e-2
    cost_multiplier: float = 1.5
    patience: int = 5
    success_threshold: float = 0.99
    early_stop_patience: int = 10
    max_samples: int = 500
    anomaly_threshold: float = 2.0
    seed: int = 0


def anomaly_index(norms) -> tuple[float, int]:
    """Return ``(index, argmin)`` for the smallest norm's deviation below the median."""
    norms = np.asarray(norms, dtype=np.float64)
    median = np.median(norms)
    mad = MAD_CONSISTENCY * np.median(np.abs(norms - median))
    low = int(np.argmin(norms))
    gap = median - norms[low]
    if gap == 0:
        return 0.0, low
    return float(gap / max(mad, 1e-12)), low


def reverse_engineer(model: Backbone, images: torch.Tensor, target: int, cfg: NeuralCleanseConfig):
    """Smallest (mask, pattern) that sends ``images`` to ``target``.

    Returns ``(mask_l1, mask, pattern, succeeded)``.
    """
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + target)
    _, c, h, w = images.shape
    mask_raw = (torch.rand(1, h, w, generator=gen) * 2 - 1).mul_(0.5).requires_grad_()
    pattern_raw = (torch.rand(c, h, w, generator=gen) * 2 - 1).mul_(0.5).requires_grad_()
    opt = torch.optim.Adam([mask_raw, pattern_raw], lr=cfg.lr, betas=(0.5, 0.9))
    cost = cfg.init_cost
    up = down = 0
    best = (math.inf, None, None)
    stale = 0
    hits = total = 0
    y = torch.full((cfg.batch_size,), target, dtype=torch.long)
    for step in range(1, cfg.steps + 1):
        idx = torch.randint(len(images), (cfg.batch_size,), generator=gen)
        mask = (torch.tanh(mask_raw) + 1) / 2
        pattern = (torch.tanh(pattern_raw) + 1) / 2
        logits = model(images[idx] * (1 - mask) + pattern * mask)
        ce = F.cross_entropy(logits, y)
        l1 = mask.sum()
        loss = ce + cost * l1
        if not torch.isfinite(loss):
            return math.nan, None, None, False
        opt.zero_grad()
        loss.backward()
        opt.step()
        hits += (logits.argmax(1) == target).sum().item()
        total += len(idx)

        if step % cfg.patience:
            continue
        success = hits / total
        hits = total = 0
        norm = l1.item()
        if success >= cfg.success_threshold and norm < best[0]:
            if norm < best[0] * 0.999:
                stale = 0
            best = (norm, mask.detach().clone(), pattern.detach().clone())
        else:
            stale += 1
        if best[1] is not None and stale >= cfg.early_stop_patience:
            break
        # raise the size penalty while the trigger works, relax it while it does not
        if success >= cfg.success_threshold:
            up, down = up + 1, 0
            if up >= 2:
                cost, up = cost * cfg.cost_multiplier, 0
        else:
            up, down = 0, down + 1
            if down >= 2:
                cost, down = cost / cfg.cost_multiplier ** 1.5, 0
    if best[1] is None:
        mask = ((torch.tanh(mask_raw) + 1) / 2).detach()
        pattern = ((torch.tanh(pattern_raw) + 1) / 2).detach()
        return mask.sum().item(), mask, pattern, False
    return best[0], best[1], best[2], True


def neural_cleanse(model: Backbone, clean_data: LabeledImageSet, config: NeuralCleanseConfig | None = None,
                   classes=None) -> DefenseVerdict:
    cfg = config or NeuralCleanseConfig()
    if len(clean_data) == 0:
        raise ValueError("neural cleanse needs clean data")
    if len(clean_data) > cfg.max_samples:
        clean_data = subsample(clean_data, cfg.max_samples / len(clean_data), cfg.seed)
    images, _ = clean_data.tensors()
    classes = range(model.num_classes) if classes is None else classes
    was_training = model.training
    model.eval()
    freeze(model)
    norms, triggers, failed = {}, {}, []
    try:
        for target in classes:
            norm, mask, pattern, ok = reverse_engineer(model, images, target, cfg)
            if not math.isfinite(norm):
                log.warning("neural cleanse: optimisation diverged for class %d; skipped", target)
                failed.append(target)
                continue
            if not ok:
                log.warning("neural cleanse: class %d never reached %.0f%% success", target,
                            100 * cfg.success_threshold)
            norms[target] = norm
            triggers[target] = (mask.numpy(), pattern.numpy())
    finally:
        freeze(model, False)
        model.train(was_training)
    if len(norms) < 2:
        raise RuntimeError("neural cleanse: fewer than two classes produced a trigger")
    keys = sorted(norms)
    index, low = anomaly_index([norms[k] for k in keys])
    return DefenseVerdict(
        method="neural_cleanse",
        statistic=index,
        threshold=cfg.anomaly_threshold,
        per_class_scores=norms,
        suspect_class=keys[low],
        artifacts={"triggers": triggers, "skipped": failed},
    )
