"""Image quality metrics on [0, 1] images."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all elements, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation over the last two axes, keeping the valid region."""
    k = len(g)
    H, W = x.shape[-2:]
    rows = sum(g[i] * x[..., i:H - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:W - k + 1 + j] for j in range(k))


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0, size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < size:
        raise ValueError(f"images {a.shape[-2:]} smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM over channels and the valid window positions (11x11 Gaussian, sigma 1.5)."""
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean(ssim_map(a, b, peak)))


def batch_scores(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Mean per-image PSNR and SSIM over ``[N, C, H, W]`` after clipping predictions to [0, 1]."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    p = [psnr(x, y) for x, y in zip(pred, target)]
    s = [ssim(x, y) for x, y in zip(pred, target)]
    return float(np.mean(p)), float(np.mean(s))
