"""Separable Gaussian smoothing shared by annotation and augmentation."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage


def gaussian_kernel1d(sigma_px: float) -> np.ndarray:
    """Sampled Gaussian truncated at 3 sigma, normalized to unit sum."""
    if not sigma_px > 0:
        raise ValueError(f"sigma must be positive, got {sigma_px}")
    radius = max(1, int(math.ceil(3.0 * sigma_px)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_px) ** 2)
    return k / k.sum()


def gaussian_blur(field: np.ndarray, sigma_px: float) -> np.ndarray:
    """Blur a 2-D float field with two 1-D passes and mirrored borders.

    The border mode repeats the edge sample (``d c b a | a b c d``).
    """
    k = gaussian_kernel1d(sigma_px)
    out = np.asarray(field, dtype=np.float64)
    out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")
