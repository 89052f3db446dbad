"""PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

PSNR_CAP = 99.0


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, x_hat, max_val: float = 1.0) -> float:
    x, x_hat = _pair(x, x_hat)
    if not max_val > 0:
        raise InvalidArgumentError("max_val must be positive")
    err = float(np.sum((x - x_hat) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(x.size * max_val**2 / err))


def _gaussian_filter_valid(img, sigma, win):
    # separable correlation keeping only fully covered positions
    t = np.arange(win) - (win - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    out = ndimage.correlate1d(img, g, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, g, axis=1, mode="reflect")
    r = (win - 1) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim(x, x_hat, data_range: float = 1.0, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over the valid region of an 11x11 Gaussian window."""
    x, x_hat = _pair(x, x_hat)
    if x.ndim != 2 or min(x.shape) < win:
        raise InvalidArgumentError(f"image {x.shape} smaller than the {win}x{win} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = win * win
    cov_norm = n / (n - 1.0)
    mx = _gaussian_filter_valid(x, sigma, win)
    my = _gaussian_filter_valid(x_hat, sigma, win)
    vx = cov_norm * (_gaussian_filter_valid(x * x, sigma, win) - mx * mx)
    vy = cov_norm * (_gaussian_filter_valid(x_hat * x_hat, sigma, win) - my * my)
    cxy = cov_norm * (_gaussian_filter_valid(x * x_hat, sigma, win) - mx * my)
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def evaluate(x, x_hat, max_val: float = 1.0) -> MetricReport:
    return MetricReport(psnr(x, x_hat, max_val), ssim(x, x_hat, max_val))
