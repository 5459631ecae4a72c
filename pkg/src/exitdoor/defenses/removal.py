"""Backdoor removal by adversarial unlearning and by clean fine-tuning."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..datasets import LabeledImageSet
from ..models import Backbone, TrainSpec, batches, check_finite, freeze, train_backbone

log = logging.getLogger(__name__)


@dataclass
class UnlearnConfig:
    lr: float = 1e-4
    batch_size: int = 64
    # universal perturbation search
    inner_steps: int = 5
    inner_lr: float = 0.1
    max_norm: float = 3.0
    seed: int = 0


def worst_case_perturbation(model: Backbone, x, y, cfg: UnlearnConfig, init=None) -> torch.Tensor:
    """One universal additive perturbation (L2-bounded) that maximises the loss on ``(x, y)``."""
    delta = (torch.zeros(x.shape[1:]) if init is None else init.clone()).requires_grad_()
    freeze(model)
    try:
        for _ in range(cfg.inner_steps):
            loss = F.cross_entropy(model((x + delta).clamp(0, 1)), y)
            grad, = torch.autograd.grad(loss, delta)
            with torch.no_grad():
                delta += cfg.inner_lr * grad / grad.norm().clamp_min(1e-12) * cfg.max_norm
                norm = delta.norm()
                if norm > cfg.max_norm:
                    delta *= cfg.max_norm / norm
    finally:
        freeze(model, False)
    return delta.detach()


def unlearn(model: Backbone, clean_data: LabeledImageSet, epochs: int = 5,
            config: UnlearnConfig | None = None) -> Backbone:
    """Alternate a worst-case perturbation search with training on perturbed and clean inputs."""
    cfg = config or UnlearnConfig()
    if len(clean_data) == 0:
        raise ValueError("unlearning needs clean data")
    model = copy.deepcopy(model)
    if epochs <= 0:
        return model
    x_all, y_all = clean_data.tensors()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    delta = None
    for epoch in range(1, epochs + 1):
        total = 0.0
        for idx in batches(len(clean_data), cfg.batch_size, gen):
            x, y = x_all[idx], y_all[idx]
            model.eval()
            delta = worst_case_perturbation(model, x, y, cfg, delta)
            model.train()
            loss = F.cross_entropy(model((x + delta).clamp(0, 1)), y) + F.cross_entropy(model(x), y)
            check_finite(loss, f"unlearning epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("unlearn epoch %d loss %.4f", epoch, total / len(clean_data))
    model.eval()
    return model


def finetune(model: Backbone, clean_data: LabeledImageSet, epochs: int = 20, lr: float = 0.01,
             batch_size: int = 64, seed: int = 0, momentum: float = 0.9,
             weight_decay: float = 5e-4) -> Backbone:
    """Standard supervised training of every layer on clean data."""
    if len(clean_data) == 0:
        raise ValueError("fine-tuning needs clean data")
    model = copy.deepcopy(model)
    if epochs <= 0:
        return model
    model, _ = train_backbone(model, clean_data, TrainSpec(epochs=epochs, learning_rate=lr, momentum=momentum,
                                                           weight_decay=weight_decay, batch_size=batch_size,
                                                           seed=seed))
    return model
