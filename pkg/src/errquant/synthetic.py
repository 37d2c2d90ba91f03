"""Piecewise-constant test images for examples and tests."""

from __future__ import annotations

import numpy as np

from .core import ConfigError


def shapes_image(shape, rng: np.random.Generator, n_shapes: int = 4, lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Constant background plus random axis-aligned rectangles and disks.

    Values stay in ``[lo, hi]`` so that noisy versions rarely leave ``[0, 1]``.
    """
    h, w = shape
    if h < 1 or w < 1:
        raise ConfigError("image shape must be positive")
    if not 0.0 <= lo < hi <= 1.0:
        raise ConfigError("need 0 <= lo < hi <= 1")
    img = np.full((h, w), rng.uniform(lo, hi))
    yy, xx = np.mgrid[:h, :w]
    for _ in range(n_shapes):
        val = rng.uniform(lo, hi)
        if rng.random() < 0.5:
            y0, y1 = np.sort(rng.integers(0, h + 1, 2))
            x0, x1 = np.sort(rng.integers(0, w + 1, 2))
            img[y0:y1, x0:x1] = val
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.1, 0.4) * min(h, w)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < rad**2] = val
    return img


def disk_image(size: int = 32) -> np.ndarray:
    """Fixed disk-and-rectangle scene with values in ``[0.3, 0.85]``."""
    yy, xx = np.mgrid[:size, :size]
    s = size / 32.0
    img = np.full((size, size), 0.3)
    img[(xx - 14 * s) ** 2 + (yy - 16 * s) ** 2 < (9 * s) ** 2] += 0.4
    img[(xx > 22 * s) & (yy < 10 * s)] += 0.15
    return img
