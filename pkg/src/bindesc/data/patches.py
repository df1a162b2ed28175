"""Square, axis-aligned patch sampling around keypoints."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

PATCH_SIZE = 32
DOG_FACTOR = 16.0
FAST_FACTOR = 31.0
MAX_FILL = 0.25


class WindowError(ValueError):
    pass


def window_grid(x, y, side, size=PATCH_SIZE):
    """Sample coordinates of a ``size``x``size`` grid covering the window.

    Samples sit at the centres of ``size`` equal cells spanning
    [x - side/2, x + side/2], so a 32 px window around a keypoint at a
    half-integer position lands exactly on image pixels.
    """
    step = side / size
    off = (np.arange(size) + 0.5) * step - side / 2
    return x + off, y + off


def extract_patch(image, x, y, side, size=PATCH_SIZE, max_fill=MAX_FILL, antialias=True):
    """Bilinear crop of a ``side``-pixel window resampled to ``size``x``size``.

    Out-of-image samples replicate the nearest edge pixel.  Returns
    ``(patch, fill)`` where ``fill`` is the fraction of replicated samples;
    ``patch`` is None when ``fill`` exceeds ``max_fill``.
    """
    patches, fills = extract_patches(image, [x], [y], [side], size, max_fill, antialias)
    return patches[0], fills[0]


def extract_patches(image, xs, ys, sides, size=PATCH_SIZE, max_fill=MAX_FILL, antialias=True):
    """Vectorised :func:`extract_patch`; rejected entries come back as None.

    With ``antialias`` the image is low-passed before sampling windows that
    shrink by about 1.41x or more (one blur per octave of shrink).
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    sides = np.asarray(sides, dtype=np.float64)
    if np.any(sides <= 0):
        raise WindowError("window side must be positive")
    out = [None] * len(xs)
    fills = np.zeros(len(xs))
    shrink = sides / size
    level = np.where(antialias, np.maximum(0, np.round(np.log2(np.maximum(shrink, 1e-9)))), 0)
    level = level.astype(int)
    blurred = {}
    for i in range(len(xs)):
        gx, gy = window_grid(xs[i], ys[i], sides[i], size)
        in_x = (gx >= 0) & (gx <= w - 1)
        in_y = (gy >= 0) & (gy <= h - 1)
        if not in_x.any() or not in_y.any():
            raise WindowError(f"window at ({xs[i]:.1f}, {ys[i]:.1f}) is outside the image")
        fill = 1.0 - in_x.mean() * in_y.mean()
        fills[i] = fill
        if fill > max_fill:
            continue
        lv = level[i]
        if lv not in blurred:
            # sigma of a box-filter-equivalent decimation by 2**lv
            blurred[lv] = img if lv == 0 else ndimage.gaussian_filter(
                img, 0.5 * np.sqrt(4.0 ** lv - 1), mode="nearest")
        src = blurred[lv]
        X, Y = np.meshgrid(np.clip(gx, 0, w - 1), np.clip(gy, 0, h - 1))
        out[i] = ndimage.map_coordinates(src, [Y, X], order=1, mode="nearest")
    return out, fills


def window_side(eta, kind):
    if kind == "dog":
        return DOG_FACTOR * eta
    if kind == "fast":
        return FAST_FACTOR * eta
    raise ValueError(f"unknown detector kind {kind!r}")


def to_uint8(patch):
    return np.clip(np.round(np.asarray(patch) * 255.0), 0, 255).astype(np.uint8)
