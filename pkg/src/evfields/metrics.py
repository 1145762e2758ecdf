"""Image-quality and trajectory-error metrics.

PSNR assumes [0, 1] images and is capped at 99 dB for exact matches.  SSIM is
single-scale with the standard 11x11 Gaussian window (sigma 1.5, K1=0.01,
K2=0.03, dynamic range 1), computed on luminance over valid window positions.
ATE-RMSE applies no alignment transform: estimated and reference trajectories
share the world frame in this package.
"""

from __future__ import annotations

import numpy as np

from .events import luminance

PSNR_CAP = 99.0


def mse_psnr(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Channel-mean squared error and the PSNR it implies."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return 0.0, PSNR_CAP
    return mse, float(min(-10.0 * np.log10(mse), PSNR_CAP))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 2-d Gaussian built from `kernel`."""
    from scipy.signal import correlate

    tmp = correlate(img, kernel[None, :], mode="valid")
    return correlate(tmp, kernel[:, None], mode="valid")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a = luminance(np.asarray(a, dtype=np.float64))
    b = luminance(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < 11:
        raise ValueError("images must be at least 11x11 for the SSIM window")
    k = _gaussian_kernel()
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = _window_means(a, k)
    mu_b = _window_means(b, k)
    var_a = _window_means(a * a, k) - mu_a * mu_a
    var_b = _window_means(b * b, k) - mu_b * mu_b
    cov = _window_means(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ate_rmse(estimated: list[tuple[float, np.ndarray]],
             reference: list[tuple[float, np.ndarray]]) -> float:
    """RMS translation error between timestamp-matched trajectories."""
    if len(estimated) != len(reference):
        raise ValueError("trajectories must have the same length")
    est = sorted(estimated, key=lambda e: e[0])
    ref = sorted(reference, key=lambda e: e[0])
    t_est = np.array([e[0] for e in est])
    t_ref = np.array([e[0] for e in ref])
    if np.max(np.abs(t_est - t_ref)) > 1e-9:
        raise ValueError("trajectory timestamps do not match")
    p_est = np.stack([np.asarray(e[1], dtype=np.float64) for e in est])
    p_ref = np.stack([np.asarray(e[1], dtype=np.float64) for e in ref])
    return float(np.sqrt(np.mean(np.sum((p_est - p_ref) ** 2, axis=1))))
