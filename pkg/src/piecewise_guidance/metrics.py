"""PSNR and SSIM on images with values in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate

__all__ = ["ImageBuffer", "psnr", "ssim", "gaussian_window"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class ImageBuffer:
    """An ``(height, width, channels)`` float image."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or min(d.shape) < 1:
            raise ValueError(f"image data must be (h, w) or (h, w, c), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image data must be finite")
        object.__setattr__(self, "data", d)

    @classmethod
    def from_vector(cls, x, height: int, width: int, channels: int = 1) -> "ImageBuffer":
        return cls(np.asarray(x, dtype=np.float64).reshape(height, width, channels))

    @property
    def shape(self):
        return self.data.shape

    def clipped(self) -> np.ndarray:
        return np.clip(self.data, 0.0, 1.0)


def _pair(a, b):
    a = a if isinstance(a, ImageBuffer) else ImageBuffer(a)
    b = b if isinstance(b, ImageBuffer) else ImageBuffer(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a.clipped(), b.clipped()


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for data range 1; ``inf`` if identical."""
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, averaged over channels."""
    x, y = _pair(a, b)
    h, w, c = x.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    win = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    vals = []
    for ch in range(c):
        xi, yi = x[:, :, ch], y[:, :, ch]

        def filt(img):
            return correlate(img, win, mode="valid", method="direct")

        mx, my = filt(xi), filt(yi)
        sxx = filt(xi * xi) - mx * mx
        syy = filt(yi * yi) - my * my
        sxy = filt(xi * yi) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))
