"""Procedural 16x16 shape images used as training and calibration data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import InvalidConfig

CLASS_NAMES = ("circle", "square", "cross", "stripe")


@dataclass(frozen=True)
class ToyDataset:
    images: np.ndarray  # (N, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def _draw(kind: int, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        mask = dy**2 + dx**2 <= r**2
    elif kind == 1:
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif kind == 2:
        arm = max(r / 3.0, 0.75)
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    else:
        # parallel bars along a random direction
        u = dx * np.cos(angle) + dy * np.sin(angle)
        period = max(r, 2.0)
        mask = np.mod(u, 2 * period) < period
    return np.where(mask, 1.0, -1.0)


def make_dataset(n: int = 2000, seed: int = 0, size: int = 16, num_classes: int = 4) -> ToyDataset:
    """Generate ``n`` labelled shape images, balanced over classes.

    Identical ``(n, seed, size)`` gives bitwise identical arrays.
    """
    if n < 1:
        raise InvalidConfig("dataset must contain at least one image")
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise InvalidConfig(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, size, size), dtype=np.float32)
    for i, kind in enumerate(labels):
        r = rng.uniform(0.15, 0.3) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        angle = rng.uniform(0, np.pi)
        images[i] = _draw(int(kind), size, cy, cx, r, angle)
    return ToyDataset(images=images, labels=labels, seed=seed)
