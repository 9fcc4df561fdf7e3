"""Shared test utilities: independent oracles and finite-difference probes.

The oracles here are deliberately written from the definitions (plain
loops, direct summation) and never call the library code paths they are
used to check.
"""

import numpy as np


def directional_derivative(fn, x, v, h=1e-6):
    """Central finite difference of fn along direction v at x."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (fn(x + h * v) - fn(x - h * v)) / (2.0 * h)


def rel_error(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def brute_force_ssim(a, b, c1=1e-4, c2=9e-4, window=7):
    """Sliding-window SSIM by direct per-window statistics."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    height, width, channels = a.shape
    values = []
    for c in range(channels):
        for i in range(height - window + 1):
            for j in range(width - window + 1):
                wa = a[i:i + window, j:j + window, c]
                wb = b[i:i + window, j:j + window, c]
                mu_a = wa.mean()
                mu_b = wb.mean()
                var_a = ((wa - mu_a) ** 2).mean()
                var_b = ((wb - mu_b) ** 2).mean()
                cov = ((wa - mu_a) * (wb - mu_b)).mean()
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
                values.append(num / den)
    return float(np.mean(values))


def brute_force_kl_inception(probs):
    """Single-split inception score via direct summation."""
    probs = np.asarray(probs, dtype=np.float64)
    marginal = probs.mean(axis=0)
    total = 0.0
    for row in probs:
        kl = 0.0
        for p, q in zip(row, marginal):
            if p > 0:
                kl += p * (np.log(p) - np.log(q))
        total += kl
    return float(np.exp(total / len(probs)))


def brute_force_sq_error(pred, target):
    """Elementwise sum of squared differences via python loops."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    total = 0.0
    for p, t in zip(pred, target):
        total += (p - t) ** 2
    return total
