"""Windowed structural similarity (SSIM) with an analytic gradient.

The score is the classic luminance/contrast/structure product evaluated on
every valid uniform window and averaged over windows and channels:

    S_w = (2*mu_a*mu_b + C1) * (2*cov_ab + C2)
          -----------------------------------------
          (mu_a^2 + mu_b^2 + C1) * (var_a + var_b + C2)

with population (divide-by-n) window statistics. Values lie in (-1, 1],
S(a, a) == 1 exactly, and the function is symmetric in its arguments.
``ssim_with_grad`` additionally returns d(mean SSIM)/da and /db, assembled
window by window from the closed-form derivative of S_w. The training loss
is ``1 - ssim``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import FLOAT

DEFAULT_C1 = 1e-4  # (0.01)^2 on unit dynamic range
DEFAULT_C2 = 9e-4  # (0.03)^2 on unit dynamic range
DEFAULT_WINDOW = 7


def _as_hwc(img, name):
    arr = np.asarray(img, dtype=FLOAT)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (H, W) or (H, W, C), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def _window_stats(a, b, window):
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _check_pair(a, b, window):
    a = _as_hwc(a, "a")
    b = _as_hwc(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    window = int(window)
    if window < 2:
        raise ValueError("window must be >= 2")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images {a.shape[:2]} smaller than window {window}")
    return a, b, window


def ssim(a, b, c1=DEFAULT_C1, c2=DEFAULT_C2, window=DEFAULT_WINDOW):
    """Mean windowed SSIM between two images in [0, 1]."""
    a, b, window = _check_pair(a, b, window)
    mu_a, mu_b, var_a, var_b, cov = _window_stats(a, b, window)
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_loss(a, b, c1=DEFAULT_C1, c2=DEFAULT_C2, window=DEFAULT_WINDOW):
    """1 - ssim(a, b); zero iff the images agree everywhere."""
    return 1.0 - ssim(a, b, c1=c1, c2=c2, window=window)


def ssim_with_grad(a, b, c1=DEFAULT_C1, c2=DEFAULT_C2, window=DEFAULT_WINDOW):
    """Return (ssim value, d/da, d/db) of the mean windowed SSIM."""
    a, b, window = _check_pair(a, b, window)
    mu_a, mu_b, var_a, var_b, cov = _window_stats(a, b, window)
    n = float(window * window)

    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = var_a + var_b + c2
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * cov + c2
    inv_den = 1.0 / (b1 * b2)
    s = a1 * a2 * inv_den
    value = float(np.mean(s))

    count = float(s.size)
    ds_da1 = a2 * inv_den
    ds_da2 = a1 * inv_den
    ds_db1 = -s / b1
    ds_db2 = -s / b2

    def pixel_grad(mu_x, mu_y, x, y):
        # dS/dmu_x, dS/dvar_x and dS/dcov chained into one pixel of the window
        d_mu = ds_da1 * 2.0 * mu_y + ds_db1 * 2.0 * mu_x
        d_var = ds_db2
        d_cov = ds_da2 * 2.0
        grad = _spread(d_mu - 2.0 * d_var * mu_x - d_cov * mu_y, a.shape, window)
        grad += x * _spread(2.0 * d_var, a.shape, window)
        grad += y * _spread(d_cov, a.shape, window)
        return grad / (n * count)

    return value, pixel_grad(mu_a, mu_b, a, b), pixel_grad(mu_b, mu_a, b, a)


def _spread(field, shape, window):
    """Scatter-add per-window coefficients back onto the pixel grid."""
    out = np.zeros(shape, dtype=FLOAT)
    nh, nw = field.shape[0], field.shape[1]
    for u in range(window):
        for v in range(window):
            out[u:u + nh, v:v + nw, :] += field
    return out
