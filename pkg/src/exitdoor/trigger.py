"""Patch triggers and the stamping function x * (1 - m) + p * m."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass(frozen=True)
class TriggerSpec:
    """Dense binary mask plus pattern, both shaped (C, H, W)."""

    mask: np.ndarray
    pattern: np.ndarray
    name: str = "trigger"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float32)
        pattern = np.asarray(self.pattern, dtype=np.float32)
        if mask.shape != pattern.shape or mask.ndim != 3:
            raise ValueError(f"mask {mask.shape} and pattern {pattern.shape} must share a (C,H,W) shape")
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        if pattern.min() < 0.0 or pattern.max() > 1.0:
            raise ValueError("pattern values must lie in [0, 1]")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pattern", pattern)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        np.savez_compressed(path, mask=self.mask, pattern=self.pattern, name=np.array(self.name))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TriggerSpec":
        with np.load(path) as blob:
            return cls(blob["mask"], blob["pattern"], str(blob["name"]))


def apply_trigger(x, trigger: TriggerSpec):
    """Stamp ``trigger`` into ``x``; works on a single image or a batch.

    Accepts numpy arrays or torch tensors and returns the same kind. The input
    is never modified in place.
    """
    shape = tuple(x.shape[-3:])
    if shape != trigger.shape:
        raise ValueError(f"image shape {shape} does not match trigger shape {trigger.shape}")
    if isinstance(x, torch.Tensor):
        m = torch.as_tensor(trigger.mask, dtype=x.dtype, device=x.device)
        p = torch.as_tensor(trigger.pattern, dtype=x.dtype, device=x.device)
        return x * (1 - m) + p * m
    x = np.asarray(x)
    m = trigger.mask.astype(x.dtype, copy=False)
    p = trigger.pattern.astype(x.dtype, copy=False)
    return x * (1 - m) + p * m


def make_checkerboard_trigger(size: int, image_shape=(3, 32, 32), corner: str = "bottom-right") -> TriggerSpec:
    c, h, w = image_shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"trigger size {size} does not fit a {h}x{w} image")
    if corner not in CORNERS:
        raise ValueError(f"unknown corner {corner!r}; expected one of {CORNERS}")
    top = h - size if corner.startswith("bottom") else 0
    left = w - size if corner.endswith("right") else 0

    mask = np.zeros(image_shape, dtype=np.float32)
    pattern = np.zeros(image_shape, dtype=np.float32)
    mask[:, top:top + size, left:left + size] = 1.0
    # top-left pixel of the square is 1
    rows, cols = np.indices((size, size))
    board = ((rows + cols) % 2 == 0).astype(np.float32)
    pattern[:, top:top + size, left:left + size] = board
    return TriggerSpec(mask, pattern, name=f"checkerboard{size}-{corner}")
