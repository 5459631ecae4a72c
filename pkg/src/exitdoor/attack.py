"""Multi-exit backdoor injection through surrogate ICs, plus a BadNets control.

Injection runs three steps on a clean backbone:

1. attach surrogate ICs at blocks ``1..n`` (``n = floor(p * N)``) and fit them
   on the attacker's clean data with the backbone frozen;
2. freeze the ICs and update the backbone to minimise
   ``L = L_backdoor + lambda * L_stealth``;
3. drop the ICs and release the backbone.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .datasets import LabeledImageSet, poison_dataset
from .models import Backbone, TrainSpec, batches, check_finite, checksum, freeze, num_attack_ics, train_backbone
from .multiexit import MultiExitModel, attach_ics, strip_ics, train_ics
from .trigger import TriggerSpec, apply_trigger, make_checkerboard_trigger

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    exit_layer_ratio: float = 0.8
    stealth_weight: float = 1.0
    ic_epochs: int = 20
    ic_lr: float = 1e-3
    ic_weight_decay: float = 0.0
    inject_epochs: int = 10
    inject_lr: float = 1e-3
    target_label: int = 0
    poison_fraction: float = 0.5
    trigger: TriggerSpec = field(default_factory=lambda: make_checkerboard_trigger(7, (3, 32, 32)))
    batch_size: int = 64
    optimizer: str = "adam"
    # stealth batches also carry triggered copies under their true labels
    stealth_triggered: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.exit_layer_ratio < 1.0):
            raise ValueError("exit_layer_ratio must lie in (0, 1)")
        if self.stealth_weight < 0:
            raise ValueError("stealth_weight must be non-negative")
        if self.ic_epochs < 1 or self.inject_epochs < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.ic_lr <= 0 or self.inject_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 < self.poison_fraction <= 1.0):
            raise ValueError("poison_fraction must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def _attack_exits(model: MultiExitModel, ratio: float) -> int:
    n = num_attack_ics(model.backbone.num_blocks, ratio)
    missing = [l for l in range(1, n + 1) if str(l) not in model.ics]
    if missing:
        raise ValueError(f"backdoor loss needs ICs at blocks 1..{n}; missing {missing}")
    return n


def _exit_ce(logits: torch.Tensor, y: torch.Tensor, reduction: str) -> torch.Tensor:
    return F.cross_entropy(logits, y, reduction=reduction)


def backdoor_loss(model: MultiExitModel, x, y, ratio: float, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy summed over the first ``floor(p * N)`` exits, on poisoned pairs."""
    n = _attack_exits(model, ratio)
    logits = model.exit_logits(x, include_final=False)
    return sum(_exit_ce(logits[l], y, reduction) for l in range(1, n + 1))


def stealth_loss(model: MultiExitModel, x, y, ratio: float, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy over every exit beyond ``floor(p * N)``, final head included, on clean pairs."""
    n = _attack_exits(model, ratio)
    logits = model.exit_logits(x)
    return sum(_exit_ce(v, y, reduction) for l, v in logits.items() if l > n)


def combined_loss(model: MultiExitModel, poisoned_batch, clean_batch, config: AttackConfig,
                  reduction: str = "mean", parts: bool = False):
    lb = backdoor_loss(model, *poisoned_batch, config.exit_layer_ratio, reduction)
    if config.stealth_weight == 0:
        total, ls = lb, lb.new_zeros(())
    else:
        ls = stealth_loss(model, *clean_batch, config.exit_layer_ratio, reduction)
        total = lb + config.stealth_weight * ls
    return (total, lb, ls) if parts else total


def inject_backdoor(backbone: Backbone, attacker_data: LabeledImageSet, config: AttackConfig):
    """Run the three injection steps on a copy of ``backbone``.

    Returns ``(backdoored_backbone, log)`` where ``log`` holds per-epoch records
    of ``L``, ``L_B``, ``L_S`` and the IC checksums observed during step 2.
    """
    if attacker_data.num_classes != backbone.num_classes:
        raise ValueError("attacker data and backbone disagree on the class count")
    if len(attacker_data) < config.batch_size:
        raise ValueError(f"attacker data has {len(attacker_data)} items, fewer than one batch")
    model = copy.deepcopy(backbone)
    n = num_attack_ics(model.num_blocks, config.exit_layer_ratio)

    # step 1: surrogate ICs on the frozen clean backbone
    sdn = attach_ics(model, range(1, n + 1), seed=config.seed)
    sdn, ic_history = train_ics(sdn, attacker_data, epochs=config.ic_epochs, lr=config.ic_lr,
                                seed=config.seed, weight_decay=config.ic_weight_decay)

    # step 2: frozen ICs, backbone minimises L_B + lambda * L_S
    poisoned = poison_dataset(attacker_data, config.trigger, config.target_label, config.poison_fraction, config.seed)
    xp, yp = poisoned.tensors()
    xc, yc = attacker_data.tensors()
    if config.stealth_triggered:
        xc = torch.cat([xc, apply_trigger(xc, config.trigger)])
        yc = torch.cat([yc, yc])

    freeze(sdn.ics)
    params = list(model.parameters())
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.inject_lr)
    else:
        opt = torch.optim.SGD(params, lr=config.inject_lr, momentum=0.9)
    gen = torch.Generator().manual_seed(config.seed + 1)
    clean_gen = torch.Generator().manual_seed(config.seed + 2)
    records = []
    ic_sum = checksum(sdn.ics)
    for epoch in range(1, config.inject_epochs + 1):
        model.train()
        sdn.ics.eval()
        sums = torch.zeros(3)
        steps = 0
        clean_order = torch.randperm(len(xc), generator=clean_gen)
        for step, idx in enumerate(batches(len(xp), config.batch_size, gen)):
            cidx = clean_order[(torch.arange(len(idx)) + step * config.batch_size) % len(xc)]
            total, lb, ls = combined_loss(sdn, (xp[idx], yp[idx]), (xc[cidx], yc[cidx]), config, parts=True)
            check_finite(total, f"backdoor injection epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += torch.tensor([total.item(), lb.item(), ls.item()])
            steps += 1
        loss, lb, ls = (sums / steps).tolist()
        records.append({"epoch": epoch, "loss": loss, "loss_backdoor": lb, "loss_stealth": ls,
                        "lr": config.inject_lr, "ic_checksum": checksum(sdn.ics)})
        log.info("inject epoch %d  L %.4f  L_B %.4f  L_S %.4f", epoch, loss, lb, ls)
    if checksum(sdn.ics) != ic_sum:
        raise RuntimeError("surrogate IC parameters changed during injection")
    freeze(sdn.ics, False)

    # step 3: drop the ICs
    released = strip_ics(sdn)
    released.eval()
    return released, {"ic_training": ic_history, "injection": records, "num_attack_ics": n}


def badnets_baseline(backbone: Backbone, train_data: LabeledImageSet, config: AttackConfig,
                     spec: TrainSpec, opacity_min: float = 1.0) -> Backbone:
    """Classic data-poisoning backdoor: retrain ``backbone`` on a poisoned copy of ``train_data``."""
    model = copy.deepcopy(backbone)
    poisoned = poison_dataset(train_data, config.trigger, config.target_label, config.poison_fraction, config.seed,
                              opacity_min)
    model, _ = train_backbone(model, poisoned, spec)
    return model
