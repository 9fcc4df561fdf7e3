"""Differentiable image augmentations for adversarial training.

The same random transform is applied to the real and the generated branch
of a discriminator step, so the policy is driven by an explicit seed. Each
op is differentiable with respect to the pixels (translation and cutout
are linear maskings; brightness and saturation are affine up to the final
clamp into [0, 1]), and ``augment_batch_with_grad`` returns a closure that
backpropagates through the exact transform that was sampled.
"""

from __future__ import annotations

import numpy as np

from .nn import FLOAT

BRIGHTNESS_RANGE = 0.2      # additive shift ~ U(-0.2, 0.2)
SATURATION_RANGE = (0.5, 1.5)
TRANSLATION_RATIO = 0.125   # max shift as a fraction of H/W
CUTOUT_RATIO = 0.3          # side of the zeroed square as a fraction of H/W

POLICIES = {
    "identity": (),
    "standard": ("brightness", "saturation", "translation", "cutout"),
    "color": ("brightness", "saturation"),
    "geometry": ("translation", "cutout"),
}


def _clip01(pre):
    out = np.clip(pre, 0.0, 1.0)
    mask = ((pre > 0.0) & (pre < 1.0)).astype(FLOAT)
    return out, mask


def _brightness(x, rng):
    shift = rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, size=(x.shape[0], 1, 1, 1))
    out, mask = _clip01(x + shift)

    def backward(g):
        return g * mask

    return out, backward


def _saturation(x, rng):
    factor = rng.uniform(*SATURATION_RANGE, size=(x.shape[0], 1, 1, 1))
    mean = x.mean(axis=3, keepdims=True)
    out, mask = _clip01(mean + factor * (x - mean))

    def backward(g):
        g = g * mask
        return factor * g + (1.0 - factor) * g.mean(axis=3, keepdims=True)

    return out, backward


def _translation(x, rng):
    batch, height, width, _ = x.shape
    max_dy = int(height * TRANSLATION_RATIO)
    max_dx = int(width * TRANSLATION_RATIO)
    dy = rng.integers(-max_dy, max_dy + 1, size=batch)
    dx = rng.integers(-max_dx, max_dx + 1, size=batch)

    def shift(img, sy, sx):
        out = np.zeros_like(img)
        ys, yd = (sy, 0) if sy >= 0 else (0, -sy)
        xs, xd = (sx, 0) if sx >= 0 else (0, -sx)
        h = img.shape[0] - abs(sy)
        w = img.shape[1] - abs(sx)
        out[ys:ys + h, xs:xs + w] = img[yd:yd + h, xd:xd + w]
        return out

    out = np.stack([shift(x[i], dy[i], dx[i]) for i in range(batch)])

    def backward(g):
        return np.stack([shift(g[i], -dy[i], -dx[i]) for i in range(batch)])

    return out, backward


def _cutout(x, rng):
    batch, height, width, _ = x.shape
    side_h = max(1, int(height * CUTOUT_RATIO))
    side_w = max(1, int(width * CUTOUT_RATIO))
    top = rng.integers(0, height - side_h + 1, size=batch)
    left = rng.integers(0, width - side_w + 1, size=batch)
    mask = np.ones_like(x)
    for i in range(batch):
        mask[i, top[i]:top[i] + side_h, left[i]:left[i] + side_w, :] = 0.0
    out = x * mask

    def backward(g):
        return g * mask

    return out, backward


_OPS = {
    "brightness": _brightness,
    "saturation": _saturation,
    "translation": _translation,
    "cutout": _cutout,
}


def augment_batch_with_grad(images, policy, seed):
    """Apply ``policy`` to a (B, H, W, 3) batch; return (out, backward_fn)."""
    if policy not in POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}; known: {sorted(POLICIES)}")
    x = np.asarray(images, dtype=FLOAT)
    if x.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) batch, got shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("augmentation input must lie in [0, 1]")
    if policy == "identity":
        out = x.copy()
        return out, lambda g: g

    rng = np.random.default_rng(seed)
    backwards = []
    for name in POLICIES[policy]:
        x, back = _OPS[name](x, rng)
        backwards.append(back)

    def backward(g):
        for back in reversed(backwards):
            g = back(g)
        return g

    return x, backward


def apply_augmentation(image, policy, seed):
    """Transform a single (H, W, 3) image; identity policy is a bit-exact copy."""
    image = np.asarray(image, dtype=FLOAT)
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {image.shape}")
    out, _ = augment_batch_with_grad(image[None], policy, seed)
    return out[0]
