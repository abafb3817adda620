"""Resampling helpers shared by the data pipeline and the coarse-to-fine pipeline."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .geometry import AxisMap


def sample_grid(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, order: int = 1) -> np.ndarray:
    """Sample ``img`` (``[C, h, w]`` or ``[h, w]``) at the separable grid ``ys x xs``.

    Positions outside the source read as zero. ``order=0`` is nearest neighbour
    (use it for label maps), ``order=1`` bilinear.
    """
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return sample_points(img, xx, yy, order)


def sample_points(img: np.ndarray, xx: np.ndarray, yy: np.ndarray, order: int = 1) -> np.ndarray:
    coords = np.stack([yy, xx])
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=order, mode="constant", cval=0)
    return np.stack(
        [ndimage.map_coordinates(ch, coords, order=order, mode="constant", cval=0) for ch in img]
    )


def warp(img: np.ndarray, amap: AxisMap, out_h: int, out_w: int, order: int = 1,
         antialias: bool = True) -> np.ndarray:
    """Resample ``img`` into the frame defined by ``amap`` with output size ``(out_h, out_w)``."""
    src = img
    if antialias and order > 0 and (amap.sx < 1 or amap.sy < 1):
        sig_y = max(0.0, 0.5 * (1.0 / amap.sy - 1.0))
        sig_x = max(0.0, 0.5 * (1.0 / amap.sx - 1.0))
        sigma = (sig_y, sig_x) if img.ndim == 2 else (0.0, sig_y, sig_x)
        src = ndimage.gaussian_filter(img, sigma=sigma, mode="nearest")
    xs, ys = amap.source_grid(out_h, out_w)
    out = sample_grid(src, xs, ys, order)
    return out.astype(img.dtype, copy=False)


def resize_map(src_h: int, src_w: int, out_h: int, out_w: int) -> AxisMap:
    return AxisMap(0.0, 0.0, out_w / src_w, out_h / src_h)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx**2 + yy**2 <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.astype(bool)
    return ndimage.binary_dilation(mask.astype(bool), structure=disk(radius))


def normalize_channels(img: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero mean, unit standard deviation per channel of a ``[C, h, w]`` image."""
    img = np.asarray(img, dtype=np.float32)
    mean = img.mean(axis=(1, 2), keepdims=True)
    std = img.std(axis=(1, 2), keepdims=True)
    return ((img - mean) / (std + eps)).astype(np.float32)
