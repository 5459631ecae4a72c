import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from exitdoor.datasets import (DatasetError, LabeledImageSet, load_dataset, load_registry, poison_dataset,
                               registered_datasets, sample_indices, split_disjoint, subsample)
from exitdoor.trigger import TriggerSpec, make_checkerboard_trigger


def make_set(count, num_classes=4, shape=(3, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.05, 0.95, size=(count, *shape)).astype(np.float32)
    return LabeledImageSet(images, np.arange(count) % num_classes, num_classes, "synthetic")


@pytest.fixture
def registry(tmp_path, monkeypatch):
    """A private registry + cache with a small image-folder dataset written to disk."""
    cache = tmp_path / "cache"
    entries = {
        "folder10": {"source": "image-folder", "directory": "folder10", "num_classes": 10,
                     "shape": [3, 32, 32], "train_size": 30, "test_size": 20},
        "empty-test": {"source": "procedural", "generator": "blobs2", "num_classes": 2,
                       "shape": [3, 32, 32], "train_size": 10, "test_size": 0},
        "toy2": {"source": "procedural", "generator": "blobs2", "num_classes": 2,
                 "shape": [3, 32, 32], "train_size": 40, "test_size": 20, "seed": 3},
    }
    path = tmp_path / "registry.yaml"
    path.write_text(yaml.safe_dump(entries))
    monkeypatch.setenv("EXITDOOR_DATASET_REGISTRY", str(path))
    monkeypatch.setenv("EXITDOOR_CACHE_DIR", str(cache))
    rng = np.random.default_rng(0)
    for split, size in (("train", 30), ("test", 20)):
        for i in range(size):
            d = cache / "folder10" / split / str(i % 10)
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(d / f"{i:05d}.png")
    return cache


def test_shipped_registry_has_desk_scale_sets():
    reg = load_registry()
    assert {"shapes10", "toy2", "cifar10-small"} <= set(registered_datasets())
    assert reg["cifar10-small"]["num_classes"] == 10
    assert reg["cifar10-small"]["shape"] == [3, 32, 32]
    assert reg["shapes10"]["train_size"] <= 10_000
    assert reg["toy2"]["train_size"] + reg["toy2"]["test_size"] <= 2000


def test_image_folder_count_matches_files_on_disk(registry):
    test = load_dataset("folder10", "test")
    on_disk = len(list((registry / "folder10" / "test").rglob("*.png")))
    assert len(test) == on_disk == 20
    assert test.num_classes == 10 and test.image_shape == (3, 32, 32)
    assert sorted(set(test.labels.tolist())) == list(range(10))
    assert 0.0 <= test.images.min() and test.images.max() <= 1.0


def test_image_folder_declared_size_mismatch(registry):
    next((registry / "folder10" / "train" / "0").glob("*.png")).unlink()
    with pytest.raises(DatasetError, match="registry declares"):
        load_dataset("folder10", "train")


def test_image_folder_missing_directory(registry, tmp_path, monkeypatch):
    monkeypatch.setenv("EXITDOOR_CACHE_DIR", str(tmp_path / "elsewhere"))
    with pytest.raises(DatasetError, match="missing data directory"):
        load_dataset("folder10", "train")


def test_empty_split_rejected(registry):
    with pytest.raises(DatasetError, match="empty"):
        load_dataset("empty-test", "test")


def test_unknown_name_and_split(registry):
    with pytest.raises(DatasetError):
        load_dataset("nope", "train")
    with pytest.raises(DatasetError):
        load_dataset("toy2", "validation")


def test_procedural_is_deterministic_and_cached(registry):
    a = load_dataset("toy2", "train")
    files = list((registry / "procedural").glob("*.npz"))
    assert len(files) == 1
    b = load_dataset("toy2", "train")
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    files[0].write_bytes(b"corrupt")
    c = load_dataset("toy2", "train")
    np.testing.assert_array_equal(a.images, c.images)


def test_shapes10_contract():
    data = load_dataset("shapes10", "test")
    assert len(data) == 1000 and data.num_classes == 10 and data.image_shape == (3, 32, 32)
    assert np.bincount(data.labels, minlength=10).tolist() == [100] * 10


def test_invariants_rejected():
    with pytest.raises(DatasetError):
        LabeledImageSet(np.zeros((2, 3, 4, 4)), np.zeros(3), 2)
    with pytest.raises(DatasetError):
        LabeledImageSet(np.full((1, 3, 4, 4), 1.5), np.zeros(1), 2)
    with pytest.raises(DatasetError):
        LabeledImageSet(np.zeros((1, 3, 4, 4)), np.array([2]), 2)


def test_subsample_identity_and_exact_size():
    data = make_set(1000)
    full = subsample(data, 1.0, seed=3)
    np.testing.assert_array_equal(full.images, data.images)
    part = subsample(data, 0.01, seed=7)
    assert len(part) == math.floor(0.01 * 1000) == 10
    again = subsample(data, 0.01, seed=7)
    np.testing.assert_array_equal(part.images, again.images)
    # labels are carried over with their images
    idx = sample_indices(1000, 0.01, 7)
    np.testing.assert_array_equal(part.labels, data.labels[idx])


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.01])
def test_subsample_rejects_bad_fraction(fraction):
    with pytest.raises(DatasetError):
        subsample(make_set(10), fraction, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.floats(0.001, 1.0), st.integers(0, 2**31 - 1))
def test_sample_indices_size_and_uniqueness(count, fraction, seed):
    idx = sample_indices(count, fraction, seed)
    assert len(idx) == max(1, math.floor(fraction * count + 1e-9))
    assert len(set(idx.tolist())) == len(idx)
    assert idx.min() >= 0 and idx.max() < count
    np.testing.assert_array_equal(idx, sample_indices(count, fraction, seed))


def test_split_disjoint_parts_do_not_overlap():
    data = make_set(100)
    data.images[:, 0, 0, 0] = np.arange(100) / 100  # tag each image
    a, b = split_disjoint(data, [0.2, 0.3], seed=1)
    ta, tb = set(a.images[:, 0, 0, 0].tolist()), set(b.images[:, 0, 0, 0].tolist())
    assert len(a) == 20 and len(b) == 30 and not ta & tb
    with pytest.raises(DatasetError):
        split_disjoint(data, [0.7, 0.4], seed=1)


def test_poison_full_fraction():
    data = make_set(50)
    trig = make_checkerboard_trigger(3, (3, 8, 8))
    poisoned = poison_dataset(data, trig, 2, 1.0, seed=0)
    assert (poisoned.labels == 2).all()
    inside = trig.mask.astype(bool)
    assert np.all(poisoned.images[:, inside] == trig.pattern[inside])


def test_poison_zero_mask_changes_labels_only():
    data = make_set(50)
    trig = TriggerSpec(np.zeros((3, 8, 8)), np.ones((3, 8, 8)))
    poisoned = poison_dataset(data, trig, 1, 1.0, seed=0)
    np.testing.assert_array_equal(poisoned.images, data.images)
    assert (poisoned.labels == 1).all()


def test_poison_quarter_of_200_by_pixel_diff():
    data = make_set(200)
    trig = make_checkerboard_trigger(3, (3, 8, 8))
    poisoned = poison_dataset(data, trig, 0, 0.25, seed=3)
    changed = np.any(poisoned.images != data.images, axis=(1, 2, 3))
    assert changed.sum() == 50
    # positions are preserved: untouched items are identical, in place
    np.testing.assert_array_equal(poisoned.images[~changed], data.images[~changed])
    np.testing.assert_array_equal(poisoned.labels[~changed], data.labels[~changed])
    assert (poisoned.labels[changed] == 0).all()
    outside = trig.mask == 0
    np.testing.assert_array_equal(poisoned.images[:, outside], data.images[:, outside])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 120), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_poison_changes_exactly_floor_fraction(count, fraction, seed):
    data = make_set(count)
    trig = make_checkerboard_trigger(2, (3, 8, 8))
    poisoned = poison_dataset(data, trig, 0, fraction, seed)
    changed = np.any(poisoned.images != data.images, axis=(1, 2, 3))
    assert changed.sum() == max(1, math.floor(fraction * count + 1e-9))


def test_poison_errors():
    data = make_set(10)
    with pytest.raises(DatasetError):
        poison_dataset(data, make_checkerboard_trigger(3, (3, 9, 9)), 0, 0.5, 0)
    with pytest.raises(DatasetError):
        poison_dataset(data, make_checkerboard_trigger(3, (3, 8, 8)), 4, 0.5, 0)
