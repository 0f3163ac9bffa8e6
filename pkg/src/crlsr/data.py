"""Small natural-image corpus for desk-scale runs.

Tiles are cut from the sample photographs bundled with scikit-image; the
training and held-out sets come from disjoint source photographs.
"""

from __future__ import annotations

import numpy as np

TRAIN_SOURCES = ("astronaut", "coffee", "rocket", "immunohistochemistry", "chelsea")
HELDOUT_SOURCES = ("camera", "coins", "clock")


def _source(name: str) -> np.ndarray:
    from skimage import data

    img = getattr(data, name)()
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.ascontiguousarray(img[:, :, :3].transpose(2, 0, 1).astype(np.float64) / 255.0)


def tiles(sources, per_source: int, size: int, seed: int = 0) -> list[np.ndarray]:
    """``per_source`` random ``size x size`` crops from each named photograph."""
    rng = np.random.Generator(np.random.Philox(seed))
    out = []
    for name in sources:
        img = _source(name)
        _, h, w = img.shape
        for _ in range(per_source):
            y = int(rng.integers(0, h - size + 1))
            x = int(rng.integers(0, w - size + 1))
            out.append(np.ascontiguousarray(img[:, y:y + size, x:x + size]))
    return out


def training_images(n: int = 20, size: int = 128, seed: int = 0) -> list[np.ndarray]:
    per = -(-n // len(TRAIN_SOURCES))
    return tiles(TRAIN_SOURCES, per, size, seed)[:n]


def heldout_images(n: int = 6, size: int = 96, seed: int = 1) -> list[np.ndarray]:
    per = -(-n // len(HELDOUT_SOURCES))
    return tiles(HELDOUT_SOURCES, per, size, seed)[:n]


def test_image() -> np.ndarray:
    """A fixed 128x128 natural crop (for monotonicity checks)."""
    return np.ascontiguousarray(_source("astronaut")[:, 40:168, 180:308])
