import os
from pathlib import Path

import numpy as np
import pytest

from dermalite.dataio import ImageSet, save_dataset

# published train-split class counts, in class-id order
TRAIN_COUNTS = (228, 359, 769, 80, 779, 4693, 99)


def real_archive_path():
    """The official archive, if present locally; tests needing it skip otherwise."""
    for p in (os.environ.get("DERMAMNIST_NPZ"), Path.home() / ".medmnist" / "dermamnist.npz"):
        if p and Path(p).is_file():
            return Path(p)
    return None


def class_images(counts, seed, noise=30.0):
    """Images whose colour depends on the class, plus pixel noise."""
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)]).astype(np.int64)
    base = rng.integers(60, 200, size=(len(counts), 3))
    img = base[labels][:, None, None, :] + rng.normal(0, noise, size=(len(labels), 28, 28, 3))
    return np.clip(img, 0, 255).astype(np.uint8), labels


def synthetic_sets(counts=TRAIN_COUNTS, seed=0, val_scale=1 / 7, test_scale=2 / 7):
    out = []
    for j, (split, scale) in enumerate((("train", 1.0), ("val", val_scale), ("test", test_scale))):
        c = [max(1, int(round(n * scale))) for n in counts]
        img, lab = class_images(c, seed + j)
        out.append(ImageSet(split, img, lab))
    return tuple(out)


@pytest.fixture(scope="session")
def real_archive():
    p = real_archive_path()
    if p is None:
        pytest.skip("official archive not available (set DERMAMNIST_NPZ)")
    return p


@pytest.fixture(scope="session")
def full_synthetic(tmp_path_factory):
    """Archive with the published train-split class sizes (synthetic pixels)."""
    path = tmp_path_factory.mktemp("arch") / "full.npz"
    sets = synthetic_sets()
    save_dataset(path, *sets)
    return path, sets


@pytest.fixture(scope="session")
def small_archive(tmp_path_factory):
    path = tmp_path_factory.mktemp("arch") / "small.npz"
    sets = synthetic_sets(counts=(12, 12, 12, 6, 12, 40, 6), seed=3, val_scale=0.5, test_scale=0.5)
    save_dataset(path, *sets)
    return path, sets
