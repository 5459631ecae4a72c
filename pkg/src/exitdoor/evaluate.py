"""ASR / top-k accuracy metrics and the victim-side multi-exit simulation."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datasets import LabeledImageSet
from .models import Backbone, checksum, num_attack_ics, predict_logits
from .multiexit import ExitPolicy, MultiExitModel, attach_ics, calibrate_threshold, train_ics
from .trigger import TriggerSpec, apply_trigger


def predict_labels(model, images, policy: ExitPolicy | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Labels and exit indices; backbones always exit at ``N + 1``."""
    policy = policy or ExitPolicy.disabled()
    if isinstance(model, MultiExitModel):
        labels, exits, _ = model.predict_early_exit(images, policy)
        return labels, exits
    if policy.enabled:
        raise ValueError("a plain backbone has no early exits; use the disabled policy")
    labels = predict_logits(model, images).argmax(1).numpy()
    return labels, np.full(len(labels), model.num_blocks + 1)


def compute_asr(model, test_set: LabeledImageSet, trigger: TriggerSpec, target_label: int,
                policy: ExitPolicy | None = None, exclude_target: bool = True) -> float:
    """Fraction of triggered test inputs classified as ``target_label``.

    Samples whose true label already is the target are left out by default, so
    an unaffected model scores near zero instead of the target class prior.
    """
    images, labels = test_set.images, test_set.labels
    if exclude_target:
        keep = labels != target_label
        images = images[keep]
    if len(images) == 0:
        raise ValueError("no test samples to evaluate")
    pred, _ = predict_labels(model, apply_trigger(images, trigger), policy)
    return float(np.mean(pred == target_label))


def compute_acc(model, test_set: LabeledImageSet, k: int = 1, policy: ExitPolicy | None = None) -> float:
    """Top-k accuracy. With an enabled early-exit policy only ``k=1`` is defined."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    num_classes = test_set.num_classes
    if not 1 <= k < num_classes:
        raise ValueError(f"k must satisfy 1 <= k < {num_classes}, got {k}")
    if policy is not None and policy.enabled:
        if k != 1:
            raise ValueError("top-k with early exit is undefined for k > 1")
        pred, _ = predict_labels(model, test_set.images, policy)
        return float(np.mean(pred == test_set.labels))
    if isinstance(model, MultiExitModel):
        model = model.backbone
    logits = predict_logits(model, test_set.images)
    topk = torch.topk(logits, k, dim=1).indices.numpy()
    return float(np.mean((topk == test_set.labels[:, None]).any(1)))


@dataclass
class EvalReport:
    acc_topk: dict[int, float]
    asr: float
    exit_histogram: dict[int, int]
    context: dict = field(default_factory=dict)
    triggered_exit_histogram: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        rates = [self.asr, *self.acc_topk.values()]
        if not all(0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["acc_topk"] = {str(k): v for k, v in self.acc_topk.items()}
        d["exit_histogram"] = {str(k): v for k, v in self.exit_histogram.items()}
        d["triggered_exit_histogram"] = {str(k): v for k, v in self.triggered_exit_histogram.items()}
        return d


def exit_histogram(exits: np.ndarray) -> dict[int, int]:
    values, counts = np.unique(exits, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def victim_simulation(backdoored: Backbone, victim_data: LabeledImageSet, test_set: LabeledImageSet,
                      start: int, ratio: float, trigger: TriggerSpec, target_label: int, seed: int = 0,
                      policy: ExitPolicy | None = None, ic_epochs: int = 20, ic_lr: float = 1e-3,
                      ic_weight_decay: float = 0.0, early_fraction: float = 0.5) -> EvalReport:
    """Victim attaches fresh ICs at blocks ``start..floor(p * N)`` and trains them on clean data.

    When ``policy`` is omitted the threshold is calibrated on ``victim_data`` so
    that at least ``early_fraction`` of it exits before the final head.
    """
    n = num_attack_ics(backdoored.num_blocks, ratio)
    if not (2 <= start <= n):
        raise ValueError(f"victim start block must lie in 2..{n}, got {start}")
    backbone = copy.deepcopy(backdoored)
    before = checksum(backbone)
    sdn = attach_ics(backbone, range(start, n + 1), seed=seed)
    sdn, _ = train_ics(sdn, victim_data, epochs=ic_epochs, lr=ic_lr, seed=seed,
                       weight_decay=ic_weight_decay)
    if checksum(sdn.backbone) != before:
        raise RuntimeError("victim IC training modified the backbone")
    if policy is None:
        policy = ExitPolicy(calibrate_threshold(sdn, victim_data, early_fraction))

    labels, exits = predict_labels(sdn, test_set.images, policy)
    keep = test_set.labels != target_label
    trig_labels, trig_exits = predict_labels(sdn, apply_trigger(test_set.images[keep], trigger), policy)
    return EvalReport(
        acc_topk={1: float(np.mean(labels == test_set.labels))},
        asr=float(np.mean(trig_labels == target_label)),
        exit_histogram=exit_histogram(exits),
        triggered_exit_histogram=exit_histogram(trig_exits),
        context={"arch": backdoored.arch_name, "dataset": test_set.name, "start": start, "ratio": ratio,
                 "threshold": policy.threshold, "trigger": trigger.name, "target_label": target_label,
                 "seed": seed},
    )
