"""PSNR and SSIM on the luma channel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import rgb_to_y
from .tensor import ShapeError, Tensor

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class MetricsRecord:
    id: str
    psnr_db: float
    ssim: float
    runtime_ms: float = 0.0


def _prep(pred, target, y_channel: bool) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    b = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"metrics expect N x C x H x W, got {a.shape}")
    if y_channel and a.shape[1] == 3:
        a, b = rgb_to_y(a), rgb_to_y(b)
    return a, b


def psnr(pred, target, y_channel: bool = True) -> float:
    """10 log10(1 / MSE) for data on [0, 1]; capped at 99 dB for identical inputs."""
    a, b = _prep(pred, target, y_channel)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    tmp = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(tmp, k, axis=-1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM index map over valid 11x11 Gaussian windows of two H x W arrays."""
    g = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, target, y_channel: bool = True) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, L=1)."""
    a, b = _prep(pred, target, y_channel)
    if min(a.shape[2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    vals = [ssim_map(a[n, c], b[n, c]).mean() for n in range(a.shape[0]) for c in range(a.shape[1])]
    return float(np.mean(vals))
