import os
import tempfile

# keep generated datasets out of the user's cache unless a cache is configured
os.environ.setdefault("EXITDOOR_CACHE_DIR", tempfile.mkdtemp(prefix="exitdoor-test-cache-"))

import pytest  # noqa: E402
import torch  # noqa: E402
import torch.nn as nn  # noqa: E402

from exitdoor.datasets import LabeledImageSet, generate_blobs2  # noqa: E402
from exitdoor.models import Backbone  # noqa: E402


def tiny_backbone(num_blocks: int = 3, num_classes: int = 3, width: int = 4, seed: int = 0) -> Backbone:
    """A few 3x3 conv blocks; small enough for exact gradient checks."""
    torch.manual_seed(seed)
    blocks, cin = [], 3
    for _ in range(num_blocks):
        blocks.append(nn.Sequential(nn.Conv2d(cin, width, 3, padding=1), nn.Tanh()))
        cin = width
    return Backbone(blocks, width, num_classes, "tiny")


@pytest.fixture
def tiny():
    return tiny_backbone


@pytest.fixture(scope="session")
def blobs():
    images, labels = generate_blobs2(120, 2, (3, 32, 32), seed=5)
    return LabeledImageSet(images, labels, 2, "blobs")
