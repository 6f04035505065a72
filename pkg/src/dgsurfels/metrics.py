"""Image quality metrics: PSNR and a differentiable grayscale SSIM.

SSIM follows the standard form: luma conversion, 11x11 Gaussian window with
sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over the valid
region (window fully inside the image). Images smaller than the window fall
back to the largest odd window that fits.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeMismatch

LUMA = np.array([0.299, 0.587, 0.114])
_K1 = 0.01
_K2 = 0.03
_C1 = (_K1 * 1.0) ** 2
_C2 = (_K2 * 1.0) ** 2

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE); identical images report +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return -10.0 * np.log10(mse)


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def to_luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def _window_for(shape, window):
    w = min(window, shape[0], shape[1])
    if w % 2 == 0:
        w -= 1
    return max(w, 1)


def ssim_fwd(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5):
    """Mean local SSIM on luma; returns (value, cache) for the backward."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    x = to_luma(a) if a.ndim == 3 else a
    y = to_luma(b) if b.ndim == 3 else b
    win = _window_for(x.shape, window)
    k = gaussian_kernel(win, sigma)

    mu_x = convolve2d(x, k, mode="valid")
    mu_y = convolve2d(y, k, mode="valid")
    e_xx = convolve2d(x * x, k, mode="valid")
    e_yy = convolve2d(y * y, k, mode="valid")
    e_xy = convolve2d(x * y, k, mode="valid")
    var_x = e_xx - mu_x**2
    var_y = e_yy - mu_y**2
    cov = e_xy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + _C1
    a2 = 2.0 * cov + _C2
    b1 = mu_x**2 + mu_y**2 + _C1
    b2 = var_x + var_y + _C2
    s_map = (a1 * a2) / (b1 * b2)
    value = float(s_map.mean())
    cache = (x, y, k, mu_x, mu_y, a1, a2, b1, b2, s_map, a.ndim)
    return value, cache


def ssim_bwd(cache, d_value: float = 1.0) -> np.ndarray:
    """Gradient of ssim_fwd w.r.t. the first image (RGB if it was RGB)."""
    x, y, k, mu_x, mu_y, a1, a2, b1, b2, s_map, ndim = cache
    n = s_map.size
    dS = np.full_like(s_map, d_value / n)

    inv = 1.0 / (b1 * b2)
    d_a1 = dS * a2 * inv
    d_a2 = dS * a1 * inv
    d_b1 = -dS * s_map / b1
    d_b2 = -dS * s_map / b2

    # a1 = 2 mu_x mu_y + C1 ; a2 = 2 (e_xy - mu_x mu_y) + C2
    # b1 = mu_x^2 + mu_y^2 + C1 ; b2 = e_xx - mu_x^2 + var_y + C2
    d_mu_x = 2.0 * mu_y * d_a1 - 2.0 * mu_y * d_a2 + 2.0 * mu_x * d_b1 - 2.0 * mu_x * d_b2
    d_e_xx = d_b2
    d_e_xy = 2.0 * d_a2

    # adjoint of valid-mode convolution is full-mode with the same
    # (symmetric) kernel
    up_mu = convolve2d(d_mu_x, k, mode="full")
    up_xx = convolve2d(d_e_xx, k, mode="full")
    up_xy = convolve2d(d_e_xy, k, mode="full")
    d_x = up_mu + 2.0 * x * up_xx + y * up_xy

    if ndim == 3:
        return d_x[:, :, None] * LUMA[None, None, :]
    return d_x


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    value, _ = ssim_fwd(a, b)
    return value
