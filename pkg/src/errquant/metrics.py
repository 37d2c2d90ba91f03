"""Image quality metrics for unit-range images."""

from __future__ import annotations

import math

import numpy as np
from skimage.metrics import structural_similarity

from .core import check_same_shape


def psnr(x, ref) -> float:
    """``10 log10(1 / MSE)``; ``inf`` for identical images."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    check_same_shape(x, ref, "images")
    mse = float(np.mean((x - ref) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim(x, ref) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, range 1."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    check_same_shape(x, ref, "images")
    return float(
        structural_similarity(
            x,
            ref,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )
