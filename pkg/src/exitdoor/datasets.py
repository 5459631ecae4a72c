"""Dataset registry, loading, subsampling and poisoning.

Images are float32 arrays shaped (count, C, H, W) with values in [0, 1].
Procedural datasets are generated deterministically and cached as ``.npz``
under the cache directory (``EXITDOOR_CACHE_DIR``, default
``~/.cache/exitdoor``). ``EXITDOOR_DATASET_REGISTRY`` points at an alternative
registry file.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .trigger import TriggerSpec, apply_trigger

CACHE_ENV = "EXITDOOR_CACHE_DIR"
REGISTRY_ENV = "EXITDOOR_DATASET_REGISTRY"
SPLITS = ("train", "test")


class DatasetError(Exception):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (count, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices, name: str | None = None) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes, name or self.name)

    def tensors(self):
        import torch

        return torch.from_numpy(self.images), torch.from_numpy(self.labels)


# ---------------------------------------------------------------- registry

def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "exitdoor")


def load_registry(path: str | Path | None = None) -> dict:
    path = path or os.environ.get(REGISTRY_ENV)
    if path:
        text = Path(path).read_text()
    else:
        text = resources.files("exitdoor").joinpath("registry/datasets.yaml").read_text()
    registry = yaml.safe_load(text) or {}
    if not isinstance(registry, dict):
        raise DatasetError("dataset registry must be a mapping of name -> entry")
    return registry


def registered_datasets() -> list[str]:
    return sorted(load_registry())


def load_dataset(name: str, split: str = "train") -> LabeledImageSet:
    registry = load_registry()
    if name not in registry:
        raise DatasetError(f"unknown dataset {name!r}; registered: {sorted(registry)}")
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    entry = registry[name]
    size = int(entry[f"{split}_size"])
    if size <= 0:
        raise DatasetError(f"{name}/{split} is empty")

    source = entry.get("source")
    if source == "procedural":
        images, labels = _load_procedural(name, split, entry)
    elif source == "image-folder":
        images, labels = _load_image_folder(name, split, entry)
    else:
        raise DatasetError(f"{name}: unsupported source {source!r}")

    if images.shape[1:] != tuple(entry["shape"]):
        raise DatasetError(f"{name}/{split}: images are {images.shape[1:]}, registry declares {entry['shape']}")
    return LabeledImageSet(images, labels, int(entry["num_classes"]), f"{name}-{split}")


def _load_procedural(name, split, entry):
    size = int(entry[f"{split}_size"])
    seed = int(entry.get("seed", 0)) * 2 + SPLITS.index(split)
    generator = GENERATORS.get(entry.get("generator"))
    if generator is None:
        raise DatasetError(f"{name}: unknown generator {entry.get('generator')!r}")

    path = cache_dir() / "procedural" / f"{entry['generator']}-{split}-{size}-s{seed}.npz"
    if path.exists():
        try:
            with np.load(path) as blob:
                return blob["images"], blob["labels"]
        except Exception:  # corrupt cache entry, regenerate below
            path.unlink(missing_ok=True)
    images, labels = generator(size, int(entry["num_classes"]), tuple(entry["shape"]), seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, suffix=".npz", delete=False) as fh:
        np.savez_compressed(fh, images=images, labels=labels)
    os.replace(fh.name, path)
    return images, labels


def _load_image_folder(name, split, entry):
    root = cache_dir() / entry.get("directory", name) / split
    if not root.is_dir():
        raise DatasetError(f"{name}: missing data directory {root}")
    files, labels = [], []
    for class_dir in sorted(root.iterdir(), key=lambda p: p.name):
        if not class_dir.is_dir():
            continue
        try:
            label = int(class_dir.name)
        except ValueError as exc:
            raise DatasetError(f"{name}: class directory {class_dir.name!r} is not an integer index") from exc
        for f in sorted(class_dir.glob("*.png")):
            files.append(f)
            labels.append(label)
    declared = int(entry[f"{split}_size"])
    if len(files) != declared:
        raise DatasetError(f"{name}/{split}: found {len(files)} images, registry declares {declared}")
    images = np.empty((len(files), *entry["shape"]), dtype=np.float32)
    for i, f in enumerate(files):
        try:
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise DatasetError(f"{name}: cannot decode {f}") from exc
        images[i] = arr.transpose(2, 0, 1)
    return images, np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------- generators

def _shape_mask(kind: int, dx, dy, s):
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    if kind == 0:  # disk
        return r < s
    if kind == 1:  # wide ellipse
        return (dx / s) ** 2 + (dy / (0.5 * s)) ** 2 < 1
    if kind == 2:  # tall ellipse
        return (dx / (0.5 * s)) ** 2 + (dy / s) ** 2 < 1
    if kind == 3:  # ring
        return (r < s) & (r > 0.6 * s)
    if kind == 4:  # triangle, apex up
        return (dy < 0.8 * s) & (np.abs(dx) < (dy + s) * 0.6)
    if kind == 5:  # triangle, apex down
        return (dy > -0.8 * s) & (np.abs(dx) < (s - dy) * 0.6)
    if kind == 6:  # plus
        return ((np.abs(dx) < 0.3 * s) & (np.abs(dy) < s)) | ((np.abs(dy) < 0.3 * s) & (np.abs(dx) < s))
    if kind == 7:  # crescent
        return (r < s) & (np.hypot(dx - 0.5 * s, dy) > 0.8 * s)
    if kind == 8:  # five-lobed star
        return r < s * (0.6 + 0.35 * np.cos(5 * theta))
    # pair of disks
    return (np.hypot(dx - 0.55 * s, dy) < 0.45 * s) | (np.hypot(dx + 0.55 * s, dy) < 0.45 * s)


def _smooth_field(rng, c: int, h: int, w: int, cells: int = 4) -> np.ndarray:
    """Bilinear upsampling of a ``cells x cells`` random colour grid."""
    coarse = rng.uniform(0.0, 1.0, size=(c, cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.minimum(ys.astype(int), cells - 2)
    x0 = np.minimum(xs.astype(int), cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = coarse[:, y0][:, :, x0] * (1 - fx) + coarse[:, y0][:, :, x0 + 1] * fx
    bottom = coarse[:, y0 + 1][:, :, x0] * (1 - fx) + coarse[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


def generate_shapes(count: int, num_classes: int, shape, seed: int):
    """Silhouette classes on smooth random backgrounds; the class is the outline.

    Colour, position, scale and a small rotation are drawn per image. None of
    the classes is a small textured square, so a corner patch trigger has no
    natural look-alike among them.
    """
    if num_classes > 10:
        raise DatasetError("shapes generator supports at most 10 classes")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    images = np.empty((count, c, h, w), dtype=np.float32)
    for i, label in enumerate(labels):
        bg = 0.2 + 0.6 * _smooth_field(rng, c, h, w)
        bg_mean = bg.mean(axis=(1, 2), keepdims=True)
        while True:
            fg = rng.uniform(0.0, 1.0, size=(c, 1, 1))
            if np.abs(fg - bg_mean).mean() > 0.25:
                break
        shade = 1.0 + rng.uniform(-0.2, 0.2) * (yy / h - 0.5)
        s = rng.uniform(0.25, 0.36) * min(h, w)
        cx, cy = rng.uniform(0.38, 0.62, size=2) * (w, h)
        angle = rng.uniform(-0.3, 0.3)
        dx, dy = xx - cx, yy - cy
        rx = np.cos(angle) * dx + np.sin(angle) * dy
        ry = -np.sin(angle) * dx + np.cos(angle) * dy
        mask = _shape_mask(int(label), rx, ry, s)
        img = np.where(mask, fg * shade, bg) + rng.normal(0.0, 0.08, size=(c, h, w))
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


def generate_blobs2(count: int, num_classes: int, shape, seed: int):
    """Two linearly separable classes: dim versus bright images with pixel noise."""
    if num_classes != 2:
        raise DatasetError("blobs2 generator is two-class only")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    rng.shuffle(labels)
    level = np.where(labels == 1, 0.7, 0.3).astype(np.float32)
    images = level[:, None, None, None] + rng.normal(0.0, 0.08, size=(count, *shape))
    return np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


GENERATORS = {"shapes": generate_shapes, "blobs2": generate_blobs2}


# ---------------------------------------------------------------- sampling

def _check_fraction(fraction: float) -> None:
    if not (0.0 < fraction <= 1.0):
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")


def sample_indices(count: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of ``max(1, floor(fraction * count))`` items drawn without replacement."""
    _check_fraction(fraction)
    if count <= 0:
        raise DatasetError("cannot sample from an empty set")
    k = max(1, math.floor(fraction * count + 1e-9))
    if k >= count:
        return np.arange(count)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(count, size=k, replace=False))


def subsample(data: LabeledImageSet, fraction: float, seed: int) -> LabeledImageSet:
    return data.take(sample_indices(len(data), fraction, seed))


def split_disjoint(data: LabeledImageSet, fractions, seed: int) -> list[LabeledImageSet]:
    """Partition ``data`` into disjoint random parts with the given fractions."""
    if sum(fractions) > 1.0 + 1e-9:
        raise DatasetError("fractions sum to more than 1")
    order = np.random.default_rng(seed).permutation(len(data))
    parts, start = [], 0
    for f in fractions:
        _check_fraction(f)
        k = max(1, math.floor(f * len(data) + 1e-9))
        parts.append(data.take(np.sort(order[start:start + k])))
        start += k
    return parts


def poison_dataset(data: LabeledImageSet, trigger: TriggerSpec, target_label: int,
                   fraction: float, seed: int, opacity_min: float = 1.0) -> LabeledImageSet:
    """Stamp ``trigger`` on a seeded ``fraction`` of ``data`` and relabel those samples.

    With ``opacity_min < 1`` each stamp is blended in at an opacity drawn
    uniformly from ``[opacity_min, 1]``, which makes the learned backdoor
    survive partial occlusion of the trigger.
    """
    if not (0 <= target_label < data.num_classes):
        raise DatasetError(f"target label {target_label} outside [0, {data.num_classes})")
    if data.image_shape != trigger.shape:
        raise DatasetError(f"trigger shape {trigger.shape} does not match images {data.image_shape}")
    idx = sample_indices(len(data), fraction, seed)
    images = data.images.copy()
    labels = data.labels.copy()
    if not (0.0 < opacity_min <= 1.0):
        raise DatasetError(f"opacity_min must lie in (0, 1], got {opacity_min}")
    stamped = apply_trigger(images[idx], trigger)
    if opacity_min < 1.0:
        rng = np.random.default_rng([seed, 1])
        u = rng.uniform(opacity_min, 1.0, size=(len(idx), 1, 1, 1)).astype(images.dtype)
        stamped = (1 - u) * images[idx] + u * stamped
    images[idx] = stamped
    labels[idx] = target_label
    return LabeledImageSet(images, labels, data.num_classes, f"{data.name}-poisoned")


def triggered_copy(data: LabeledImageSet, trigger: TriggerSpec) -> LabeledImageSet:
    """Every image stamped with ``trigger``; labels kept."""
    return LabeledImageSet(apply_trigger(data.images, trigger), data.labels.copy(), data.num_classes,
                           f"{data.name}-triggered")
