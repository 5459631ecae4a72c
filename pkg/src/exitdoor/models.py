"""Desk-scale CNN backbones with addressable blocks, training and checkpoints."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import LabeledImageSet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class Backbone(nn.Module):
    """Ordered feature blocks followed by a pooling + linear head.

    Blocks are addressed 1..N from the outside; ``blocks[l - 1]`` is block ``l``.
    """

    def __init__(self, blocks, head_in: int, num_classes: int, arch_name: str):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(head_in, num_classes))
        self.arch_name = arch_name
        self.num_classes = num_classes

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_outputs(self, x, upto: int | None = None):
        """Yield ``(l, activation)`` after each block 1..upto."""
        upto = self.num_blocks if upto is None else upto
        for l, block in enumerate(self.blocks[:upto], start=1):
            x = block(x)
            yield l, x

    def penultimate(self, x):
        for _, x in self.block_outputs(x):
            pass
        return self.head[1](self.head[0](x))

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def conv_bn(cin, cout, stride=1, groups=1, kernel=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def depthwise_separable(cin, cout, stride=1):
    return nn.Sequential(conv_bn(cin, cin, stride, groups=cin), conv_bn(cin, cout, kernel=1))


def _resnet_mini(num_classes, width=8):
    # stem + 13 residual blocks over three stages
    w1, w2, w3 = width, width * 2, width * 4
    blocks = [conv_bn(3, w1, stride=2)]
    blocks += [BasicBlock(w1, w1) for _ in range(4)]
    blocks += [BasicBlock(w1, w2, 2)] + [BasicBlock(w2, w2) for _ in range(4)]
    blocks += [BasicBlock(w2, w3, 2)] + [BasicBlock(w3, w3) for _ in range(3)]
    return Backbone(blocks, w3, num_classes, "resnet-mini")


def _vgg_mini(num_classes, width=8):
    cfg = [(width, 2), (width, 1), (width * 2, 1), (width * 2, 1), (width * 2, 1),
           (width * 4, 2), (width * 4, 1), (width * 4, 1), (width * 8, 2), (width * 8, 1)]
    blocks, cin = [], 3
    for cout, stride in cfg:
        blocks.append(conv_bn(cin, cout, stride))
        cin = cout
    return Backbone(blocks, cin, num_classes, "vgg-mini")


def _mobilenet_mini(num_classes, width=8):
    cfg = [(width * 2, 1), (width * 2, 1), (width * 4, 2), (width * 4, 1), (width * 4, 1),
           (width * 8, 2), (width * 8, 1), (width * 8, 1), (width * 8, 1), (width * 16, 2), (width * 16, 1)]
    blocks, cin = [conv_bn(3, width, stride=2)], width
    for cout, stride in cfg:
        blocks.append(depthwise_separable(cin, cout, stride))
        cin = cout
    return Backbone(blocks, cin, num_classes, "mobilenet-mini")


ARCHITECTURES = {
    "resnet-mini": (_resnet_mini, 14),
    "vgg-mini": (_vgg_mini, 10),
    "mobilenet-mini": (_mobilenet_mini, 12),
}


def build_backbone(arch: str, num_classes: int, seed: int = 0) -> Backbone:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; registered: {sorted(ARCHITECTURES)}")
    factory, n_blocks = ARCHITECTURES[arch]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = factory(num_classes)
    assert model.num_blocks == n_blocks
    return model


def num_attack_ics(num_layers: int, ratio: float) -> int:
    """Number of exits ``floor(ratio * num_layers)`` an attacker instruments."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"exit-layer ratio must lie in (0, 1), got {ratio}")
    if num_layers < 1:
        raise ValueError("num_layers must be at least 1")
    return math.floor(ratio * num_layers + 1e-9)


@dataclass
class TrainSpec:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def batches(n: int, batch_size: int, generator: torch.Generator | None = None):
    """Index batches over ``range(n)``; shuffled when a generator is given."""
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss during {where}")


def train_backbone(model: Backbone, data: LabeledImageSet, spec: TrainSpec):
    """Plain SGD training; returns ``(model, history)`` with per-epoch loss/accuracy."""
    if data.num_classes != model.num_classes:
        raise ValueError(f"dataset has {data.num_classes} classes, model has {model.num_classes}")
    x_all, y_all = data.tensors()
    opt = torch.optim.SGD(model.parameters(), lr=spec.learning_rate, momentum=spec.momentum,
                          weight_decay=spec.weight_decay)
    gen = torch.Generator().manual_seed(spec.seed)
    history = []
    for epoch in range(1, spec.epochs + 1):
        model.train()
        total_loss, correct = 0.0, 0
        for idx in batches(len(data), spec.batch_size, gen):
            x, y = x_all[idx], y_all[idx]
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            check_finite(loss, f"backbone training epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += (logits.argmax(1) == y).sum().item()
        history.append({"epoch": epoch, "loss": total_loss / len(data), "accuracy": correct / len(data)})
        log.info("train %s epoch %d loss %.4f acc %.3f", model.arch_name, epoch,
                 history[-1]["loss"], history[-1]["accuracy"])
    model.eval()
    return model, history


@torch.no_grad()
def predict_logits(model: nn.Module, images, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    images = torch.as_tensor(images, dtype=torch.float32)
    return torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, keyed by name."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module, frozen: bool = True) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


# ---------------------------------------------------------------- checkpoints

def _state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def backbone_record(model: Backbone) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "kind": "backbone",
        "arch_name": model.arch_name,
        "num_classes": model.num_classes,
        "num_blocks": model.num_blocks,
        "parameters": _state_to_numpy(model),
    }


def save_checkpoint(model, path: str | Path, extra: dict | None = None) -> Path:
    """Write a backbone or multi-exit model; multi-exit adds an IC table keyed by location."""
    from .multiexit import MultiExitModel

    if isinstance(model, MultiExitModel):
        record = backbone_record(model.backbone)
        record["kind"] = "multiexit"
        record["ics"] = {int(l): _state_to_numpy(ic) for l, ic in model.ics.items()}
        record["ic_grid"] = model.grid
    else:
        record = backbone_record(model)
    if extra:
        record["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(record, tmp)
    tmp.replace(path)
    return path


def _load_state(module: nn.Module, arrays: dict) -> None:
    module.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()})


def load_checkpoint(path: str | Path):
    """Return a :class:`Backbone` or :class:`MultiExitModel` from a checkpoint file."""
    from .multiexit import attach_ics

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    record = torch.load(path, weights_only=False)
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {record.get('format_version')!r}")
    model = build_backbone(record["arch_name"], record["num_classes"])
    _load_state(model, record["parameters"])
    model.eval()
    if record["kind"] == "backbone":
        return model
    locations = sorted(record["ics"])
    me = attach_ics(model, locations, seed=0, grid=record.get("ic_grid", 4))
    for l in locations:
        _load_state(me.ics[str(l)], record["ics"][l])
    me.eval()
    return me


def checkpoint_extra(path: str | Path) -> dict:
    return torch.load(Path(path), weights_only=False).get("extra", {})
