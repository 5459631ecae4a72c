"""Internal classifiers, early-exit inference and edge/cloud partitioning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import LabeledImageSet
from .models import Backbone, batches, check_finite, freeze

log = logging.getLogger(__name__)


class InternalClassifier(nn.Module):
    """Adaptive average pooling to a ``grid x grid`` map, flatten, one linear layer."""

    def __init__(self, location: int, channels: int, num_classes: int, grid: int = 4):
        super().__init__()
        self.location = location
        self.reducer = nn.Sequential(nn.AdaptiveAvgPool2d(grid), nn.Flatten())
        self.fc = nn.Linear(channels * grid * grid, num_classes)

    def forward(self, activation):
        return self.fc(self.reducer(activation))


@dataclass(frozen=True)
class ExitPolicy:
    """Exit at the first IC whose max softmax probability is strictly above ``threshold``.

    ``threshold=None`` disables early exit; every sample leaves at the final head.
    """

    threshold: float | None = None

    def __post_init__(self):
        if self.threshold is not None and not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")

    @property
    def enabled(self) -> bool:
        return self.threshold is not None

    @classmethod
    def disabled(cls) -> "ExitPolicy":
        return cls(None)


class MultiExitModel(nn.Module):
    def __init__(self, backbone: Backbone, ics: dict[int, InternalClassifier], grid: int = 4):
        super().__init__()
        self.backbone = backbone
        self.ics = nn.ModuleDict({str(l): ics[l] for l in sorted(ics)})
        self.grid = grid

    @property
    def locations(self) -> list[int]:
        return sorted(int(k) for k in self.ics)

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes

    @property
    def final_index(self) -> int:
        return self.backbone.num_blocks + 1

    def exit_logits(self, x, include_final: bool = True) -> dict[int, torch.Tensor]:
        """Logits of every IC keyed by location, plus the head under ``final_index``."""
        out = {}
        upto = self.backbone.num_blocks if include_final else self.locations[-1]
        for l, x in self.backbone.block_outputs(x, upto):
            if str(l) in self.ics:
                out[l] = self.ics[str(l)](x)
        if include_final:
            out[self.final_index] = self.backbone.head(x)
        return out

    def forward(self, x):
        return self.exit_logits(x)

    @torch.no_grad()
    def predict_early_exit(self, x, policy: ExitPolicy, batch_size: int = 256):
        """Return ``(labels, exit_indices, confidences)`` arrays for a batch of images.

        The exit index is the IC's block location, or ``N + 1`` for the final head.
        """
        self.eval()
        x = torch.as_tensor(x, dtype=torch.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        results = [self._decide(self.exit_logits(x[i:i + batch_size]), policy)
                   for i in range(0, len(x), batch_size)]
        labels, exits, confs = (np.concatenate(parts) for parts in zip(*results))
        if single:
            return int(labels[0]), int(exits[0]), float(confs[0])
        return labels, exits, confs

    def _decide(self, logits: dict[int, torch.Tensor], policy: ExitPolicy):
        final = logits[self.final_index]
        n = final.shape[0]
        conf, label = F.softmax(final, dim=1).max(1)
        labels = label.numpy().copy()
        confs = conf.numpy().copy()
        exits = np.full(n, self.final_index, dtype=np.int64)
        if policy.enabled:
            pending = np.ones(n, dtype=bool)
            for l in self.locations:
                if l not in logits:
                    continue
                c, y = F.softmax(logits[l], dim=1).max(1)
                take = pending & (c.numpy() > policy.threshold)
                labels[take], confs[take], exits[take] = y.numpy()[take], c.numpy()[take], l
                pending &= ~take
        return labels, exits, confs


def attach_ics(backbone: Backbone, locations, seed: int = 0, grid: int = 4) -> MultiExitModel:
    locations = [int(l) for l in locations]
    if not locations:
        raise ValueError("at least one IC location is required")
    if len(set(locations)) != len(locations):
        raise ValueError(f"duplicate IC locations in {locations}")
    if locations != sorted(locations):
        raise ValueError(f"IC locations must be strictly increasing, got {locations}")
    if locations[0] < 1 or locations[-1] > backbone.num_blocks:
        raise ValueError(f"IC locations must lie in 1..{backbone.num_blocks}")
    channels = block_channels(backbone)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        ics = {l: InternalClassifier(l, channels[l], backbone.num_classes, grid) for l in locations}
    return MultiExitModel(backbone, ics, grid)


@torch.no_grad()
def block_channels(backbone: Backbone, image_shape=(3, 32, 32)) -> dict[int, int]:
    was_training = backbone.training
    backbone.eval()
    probe = torch.zeros(1, *image_shape)
    channels = {l: a.shape[1] for l, a in backbone.block_outputs(probe)}
    backbone.train(was_training)
    return channels


def strip_ics(model: MultiExitModel) -> Backbone:
    """Drop every IC and hand back the backbone with its current parameters."""
    return model.backbone


@torch.no_grad()
def reduced_features(model: MultiExitModel, images: torch.Tensor, batch_size: int = 256) -> dict[int, torch.Tensor]:
    """Pooled, flattened activations at every IC location (backbone in eval mode)."""
    model.backbone.eval()
    feats = {l: [] for l in model.locations}
    last = model.locations[-1]
    for i in range(0, len(images), batch_size):
        for l, a in model.backbone.block_outputs(images[i:i + batch_size], last):
            if l in feats:
                feats[l].append(model.ics[str(l)].reducer(a))
    return {l: torch.cat(v) for l, v in feats.items()}


def train_ics(model: MultiExitModel, data: LabeledImageSet, epochs: int = 20, lr: float = 1e-3,
              batch_size: int = 128, seed: int = 0, weight_decay: float = 0.0):
    """Fit only the IC layers on ``data`` with the backbone frozen in eval mode.

    Minimises the sum over ICs of the mean cross-entropy. The reducers have no
    parameters and the backbone is frozen, so pooled features are computed once
    and reused for every epoch. Returns ``(model, history)``.
    """
    if data.num_classes != model.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model has {model.num_classes}")
    history = []
    if epochs <= 0:
        return model, history
    x_all, y_all = data.tensors()
    freeze(model.backbone)
    try:
        feats = reduced_features(model, x_all)
        fcs = [model.ics[str(l)].fc for l in model.locations]
        params = [p for fc in fcs for p in fc.parameters()]
        opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
        gen = torch.Generator().manual_seed(seed)
        for epoch in range(1, epochs + 1):
            total = 0.0
            for idx in batches(len(data), batch_size, gen):
                y = y_all[idx]
                loss = sum(F.cross_entropy(fc(feats[l][idx]), y) for l, fc in zip(model.locations, fcs))
                check_finite(loss, f"IC training epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            history.append({"epoch": epoch, "loss_ic": total / len(data)})
        log.info("IC training done: L_IC %.4f", history[-1]["loss_ic"])
    finally:
        freeze(model.backbone, False)
    model.eval()
    return model, history


@torch.no_grad()
def ic_accuracies(model: MultiExitModel, data: LabeledImageSet) -> dict[int, float]:
    x, y = data.tensors()
    model.eval()
    correct = {}
    for i in range(0, len(x), 256):
        for l, logits in model.exit_logits(x[i:i + 256]).items():
            correct[l] = correct.get(l, 0) + (logits.argmax(1) == y[i:i + 256]).sum().item()
    return {l: c / len(data) for l, c in correct.items()}


THRESHOLD_GRID = (0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.97, 0.99, 0.995, 0.999)


@torch.no_grad()
def calibrate_threshold(model: MultiExitModel, data: LabeledImageSet, early_fraction: float = 0.5,
                        grid=THRESHOLD_GRID) -> float:
    """Pick the exit threshold a deployer would use on clean ``data``.

    Among grid thresholds that send at least ``early_fraction`` of the samples
    out before the final head, returns the one with the best early-exit
    accuracy (ties go to the smaller threshold). When no grid value reaches
    ``early_fraction``, returns the largest threshold that does.
    """
    x, y = data.tensors()
    model.eval()
    logits = {}
    for i in range(0, len(x), 256):
        for l, v in model.exit_logits(x[i:i + 256]).items():
            logits.setdefault(l, []).append(v)
    logits = {l: torch.cat(v) for l, v in logits.items()}
    y = y.numpy()
    best_tau, best_acc = None, -1.0
    for tau in sorted(grid):
        labels, exits, _ = model._decide(logits, ExitPolicy(tau))
        if np.mean(exits != model.final_index) < early_fraction:
            continue
        acc = float(np.mean(labels == y))
        if acc > best_acc:
            best_tau, best_acc = float(tau), acc
    if best_tau is not None:
        return best_tau

    confs = torch.stack([F.softmax(v, 1).max(1).values for l, v in logits.items() if l != model.final_index], 1)
    best = torch.sort(confs.max(1).values).values.numpy()
    k = max(1, math.ceil(early_fraction * len(best)))
    # every one of the k most confident samples must clear the threshold strictly;
    # step down in float32 since confidences are compared at that precision
    return float(np.nextafter(best[len(best) - k], np.float32(-np.inf)))


class EdgePart(nn.Module):
    """Blocks ``1..cut`` with the ICs located there."""

    def __init__(self, model: MultiExitModel, cut: int):
        super().__init__()
        self.blocks = nn.ModuleList(model.backbone.blocks[:cut])
        self.ics = nn.ModuleDict({k: v for k, v in model.ics.items() if int(k) <= cut})
        self.cut = cut

    @torch.no_grad()
    def forward(self, x, policy: ExitPolicy):
        """Returns ``(exited, labels, exit_indices, confidences, activation)``.

        Rows with ``exited`` false have undefined label/exit/confidence and must
        be completed by the cloud part from ``activation``.
        """
        n = x.shape[0]
        labels = np.zeros(n, dtype=np.int64)
        confs = np.zeros(n, dtype=np.float32)
        exits = np.zeros(n, dtype=np.int64)
        pending = np.ones(n, dtype=bool)
        for l, block in enumerate(self.blocks, start=1):
            x = block(x)
            if policy.enabled and str(l) in self.ics:
                c, y = F.softmax(self.ics[str(l)](x), dim=1).max(1)
                take = pending & (c.numpy() > policy.threshold)
                labels[take], confs[take], exits[take] = y.numpy()[take], c.numpy()[take], l
                pending &= ~take
        return ~pending, labels, exits, confs, x


class CloudPart(nn.Module):
    """Remaining blocks, their ICs and the head."""

    def __init__(self, model: MultiExitModel, cut: int):
        super().__init__()
        self.start = cut + 1
        self.blocks = nn.ModuleList(model.backbone.blocks[cut:])
        self.ics = nn.ModuleDict({k: v for k, v in model.ics.items() if int(k) > cut})
        self.head = model.backbone.head
        self.final_index = model.final_index

    @torch.no_grad()
    def forward(self, activation, policy: ExitPolicy):
        n = activation.shape[0]
        pending = np.ones(n, dtype=bool)
        labels = np.zeros(n, dtype=np.int64)
        confs = np.zeros(n, dtype=np.float32)
        exits = np.full(n, self.final_index, dtype=np.int64)
        x = activation
        for l, block in enumerate(self.blocks, start=self.start):
            x = block(x)
            if policy.enabled and str(l) in self.ics:
                c, y = F.softmax(self.ics[str(l)](x), dim=1).max(1)
                take = pending & (c.numpy() > policy.threshold)
                labels[take], confs[take], exits[take] = y.numpy()[take], c.numpy()[take], l
                pending &= ~take
        c, y = F.softmax(self.head(x), dim=1).max(1)
        labels[pending], confs[pending] = y.numpy()[pending], c.numpy()[pending]
        return labels, exits, confs


def partition(model: MultiExitModel, cut: int) -> tuple[EdgePart, CloudPart]:
    n = model.backbone.num_blocks
    if not (1 <= cut <= n):
        raise ValueError(f"cut must lie in 1..{n}, got {cut}")
    if not any(l <= cut for l in model.locations):
        raise ValueError(f"no IC at or before block {cut}; the edge part would have no exit")
    model.eval()
    return EdgePart(model, cut), CloudPart(model, cut)


@torch.no_grad()
def run_partitioned(edge: EdgePart, cloud: CloudPart, x, policy: ExitPolicy):
    """Edge first; only samples that did not exit are shipped to the cloud part."""
    x = torch.as_tensor(x, dtype=torch.float32)
    exited, labels, exits, confs, activation = edge(x, policy)
    rest = np.flatnonzero(~exited)
    if len(rest):
        l2, e2, c2 = cloud(activation[torch.from_numpy(rest)], policy)
        labels[rest], exits[rest], confs[rest] = l2, e2, c2
    return labels, exits, confs
