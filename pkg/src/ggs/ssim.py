"""Gaussian-windowed SSIM with an analytic gradient.

Window statistics use a zero-padded 'same' convolution with a symmetric
11x11 Gaussian kernel (sigma 1.5). Zero padding keeps the window operator
self-adjoint, which makes the backward pass an application of the same
convolution; identical images still score exactly 1 because the ratio
terms cancel pointwise.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve

from .core import InvalidInputError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 1.0


def _gaussian_kernel(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _window(x: np.ndarray) -> np.ndarray:
    return convolve(x, _KERNEL, mode="constant", cval=0.0)


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise InvalidInputError("images must be HxW or HxWxC")


def ssim(img1, img2, with_gradient: bool = False):
    """Mean SSIM over pixels and channels, optionally with d(ssim)/d(img1).

    Returns a float, or (float, gradient array shaped like img1) when
    ``with_gradient`` is set.
    """
    a = _as_channels(img1)
    b = _as_channels(img2)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    total = 0.0
    grad = np.zeros_like(a) if with_gradient else None
    n_vals = a.shape[0] * a.shape[1] * a.shape[2]
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x, mu_y = _window(x), _window(y)
        xx, yy, xy = _window(x * x), _window(y * y), _window(x * y)
        var_x = xx - mu_x * mu_x
        var_y = yy - mu_y * mu_y
        cov = xy - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + c1
        a2 = 2.0 * cov + c2
        b1 = mu_x * mu_x + mu_y * mu_y + c1
        b2 = var_x + var_y + c2
        s = (a1 * a2) / (b1 * b2)
        total += float(s.sum())
        if with_gradient:
            # Partials of the per-pixel score wrt its window statistics.
            ds_da1 = a2 / (b1 * b2)
            ds_da2 = a1 / (b1 * b2)
            ds_db1 = -s / b1
            ds_db2 = -s / b2
            d_mu = (ds_da1 * 2.0 * mu_y + ds_db1 * 2.0 * mu_x
                    + ds_db2 * (-2.0 * mu_x) + ds_da2 * 2.0 * (-mu_y))
            d_xx = ds_db2          # via var_x
            d_xy = ds_da2 * 2.0    # via cov
            # The window operator is self-adjoint, so the adjoint of each
            # statistic is another pass of the same convolution.
            grad[:, :, c] = (_window(d_mu) + 2.0 * x * _window(d_xx)
                             + y * _window(d_xy)) / n_vals
    value = total / n_vals
    if with_gradient:
        g = grad if np.asarray(img1).ndim == 3 else grad[:, :, 0]
        return value, g
    return value
