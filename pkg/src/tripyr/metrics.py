"""PSNR and sharpness difference for RGB images in [0, 1]."""
from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0
SD_EPS = 1e-8


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty images")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite pixel values")
    return a, b


def psnr(pred, target, max_value: float = 1.0) -> float:
    """``20 log10(max / RMSE)``; identical images return :data:`PSNR_CAP`."""
    a, b = _pair(pred, target)
    rmse = np.sqrt(np.mean((a - b) ** 2))
    if rmse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 20.0 * np.log10(max_value / rmse)))


def _grad_sum(img: np.ndarray) -> np.ndarray:
    # adjacent-pixel absolute differences along rows and columns, summed
    gm = np.abs(img[1:, 1:] - img[:-1, 1:])
    gn = np.abs(img[1:, 1:] - img[1:, :-1])
    return gm + gn


def sharpness_difference(pred, target, max_value: float = 1.0) -> float:
    """Gradient-difference sharpness score in dB.

    Gradients are absolute differences to the pixel above and to the left,
    evaluated where both neighbours exist. ``N`` is the number of pixels.
    """
    a, b = _pair(pred, target)
    if a.shape[0] < 2 or a.shape[1] < 2:
        raise ValueError("sharpness difference needs at least 2x2 images")
    n = a.shape[0] * a.shape[1]
    denom = max(float(np.sum(np.abs(_grad_sum(a) - _grad_sum(b)))), SD_EPS)
    return float(10.0 * np.log10(n * max_value ** 2 / denom))
