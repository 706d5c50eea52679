"""Image quality metrics on [3, H, W] (or [H, W]) images with unit range."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pir.errors import ShapeError

C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10·log10(1 / MSE); identical images give +inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))


def masked_psnr(a, b, mask) -> float:
    """PSNR over the pixels where ``mask`` is set (all channels)."""
    a, b = _pair(a, b)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape[-2:]:
        raise ShapeError(f"mask {m.shape} does not match image {a.shape}")
    if not m.any():
        raise ValueError("empty mask")
    mse = float(np.mean((a - b)[..., m] ** 2))
    return float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))


def ssim(a, b, window: int = 8) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` uniform windows and channels.

    Local statistics use the population (1/N) moments of each window.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ShapeError(f"image {a.shape} smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))
