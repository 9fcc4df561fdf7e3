"""Image resizing and tensor/PNG file helpers.

Pixel tensors are (H, W, 3) float64 in [0, 1] in memory. On disk they are
either standard 8-bit PNG or raw little-endian float32, row-major; raw
files carry no header, the shape comes from the dataset manifest.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .nn import FLOAT


def resize_bilinear(img, target):
    """Bilinear resize (half-pixel convention) to (height, width).

    Same-size calls reproduce the input exactly and constant images stay
    constant; output range is contained in the input range.
    """
    height, width = int(target[0]), int(target[1])
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {(height, width)}")
    arr = np.asarray(img, dtype=FLOAT)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {arr.shape}")
    src_h, src_w = arr.shape[:2]

    def axis_coords(n_dst, n_src):
        coords = (np.arange(n_dst, dtype=FLOAT) + 0.5) * (n_src / n_dst) - 0.5
        coords = np.clip(coords, 0.0, n_src - 1.0)
        lo = np.floor(coords).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(height, src_h)
    x0, x1, fx = axis_coords(width, src_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = arr[y0][:, x0] * (1.0 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1.0 - fx) + arr[y1][:, x1] * fx
    return top * (1.0 - fy) + bot * fy


def save_png(path, img):
    """Write an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    arr = np.asarray(img)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=FLOAT)
    return arr / 255.0


def png_size(path):
    """(height, width) of a PNG without decoding the pixel data."""
    with Image.open(path) as im:
        return im.height, im.width


def write_f32(path, arr):
    """Raw little-endian float32, row-major, no header."""
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def read_f32(path, shape):
    expected = int(np.prod(shape))
    data = np.fromfile(path, dtype="<f4")
    if data.size != expected:
        raise ValueError(f"{path}: holds {data.size} float32 values, expected {expected} for shape {tuple(shape)}")
    return data.reshape(shape).astype(FLOAT)
