"""Image quality metrics on linear-RGB images in [0, 1]."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyRegion, ShapeMismatch

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, region=None) -> float:
    a, b = _pair(a, b)
    if region is None:
        return float(np.mean((a - b) ** 2))
    region = np.asarray(region).astype(bool)
    if region.shape != a.shape[:2]:
        raise ShapeMismatch(f"region {region.shape} does not match image {a.shape[:2]}")
    if not region.any():
        raise EmptyRegion("metric region selects no pixels")
    return float(np.mean((a[region] - b[region]) ** 2))


def psnr_from_mse(err: float) -> float:
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def psnr(a, b, region=None) -> float:
    """10 log10(1 / MSE), optionally over pixels where ``region`` is 1; capped at 99 dB."""
    return psnr_from_mse(mse(a, b, region))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM of the luma channels over all fully-contained windows."""
    a, b = _pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < win:
        raise ShapeMismatch(f"image {x.shape} smaller than the {win}x{win} window")
    w = gaussian_window(win, sigma)

    def filt(z):
        return np.einsum("ijkl,kl->ij", sliding_window_view(z, (win, win)), w)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())
