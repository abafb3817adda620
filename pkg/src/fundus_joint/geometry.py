"""Landmark heatmaps, coordinate decoding and ROI crop algebra.

Coordinates are ``(x, y)`` = (column, row) in pixel units. A missing landmark
is represented by ``None``; heatmaps of missing landmarks are all zeros.

Frame maps are axis-aligned: ``x_dst = (x_src - x0) * sx``. Pixel ``i`` of a
destination frame samples the source at ``x0 + i / sx``, so image resampling
and point mapping always agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np


class Point(NamedTuple):
    x: float
    y: float


def as_point(p) -> Optional[Point]:
    if p is None:
        return None
    return Point(float(p[0]), float(p[1]))


def default_sigma(h: int, divisor: float = 20.0) -> float:
    return h / divisor


def make_heatmap(c: Optional[Sequence[float]], h: int, w: int, sigma: float) -> np.ndarray:
    """Gaussian heatmap of shape ``(h, w)`` centred at ``c``, min-max normalised to [0, 1].

    ``c=None`` (absent landmark) gives an all-zero grid.
    """
    if h < 8 or w < 8:
        raise ValueError(f"heatmap grid must be at least 8x8, got {h}x{w}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if c is None:
        return np.zeros((h, w), dtype=np.float64)
    cx, cy = float(c[0]), float(c[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"landmark {c} outside [0,{w})x[0,{h})")
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
    lo, hi = g.min(), g.max()
    if hi - lo <= 0:
        return np.ones((h, w), dtype=np.float64)
    return (g - lo) / (hi - lo)


def concat_heatmaps(od: np.ndarray, fovea: np.ndarray) -> np.ndarray:
    """Stack into a ``[2, h, w]`` pair; channel 0 is the OD centre, channel 1 the fovea."""
    od = np.asarray(od)
    fovea = np.asarray(fovea)
    if od.shape != fovea.shape or od.ndim != 2:
        raise ValueError(f"heatmap shapes differ or are not 2-D: {od.shape} vs {fovea.shape}")
    return np.stack([od, fovea], axis=0)


def make_heatmap_pair(od_center, fovea, h: int, w: int, sigma: float) -> np.ndarray:
    return concat_heatmaps(make_heatmap(od_center, h, w, sigma), make_heatmap(fovea, h, w, sigma))


def argmax_point(grid: np.ndarray) -> tuple[Point, float]:
    """Location and value of the maximum; ties resolve to the smallest row-major index."""
    grid = np.asarray(grid)
    idx = int(np.argmax(grid))  # numpy returns the first occurrence
    row, col = divmod(idx, grid.shape[1])
    return Point(float(col), float(row)), float(grid.flat[idx])


def decode_channel(grid: np.ndarray, tau_det: float = 0.3) -> Optional[Point]:
    p, v = argmax_point(grid)
    if not v >= tau_det:
        return None
    return p


def decode_coords(hm: np.ndarray, tau_det: float = 0.3) -> tuple[Optional[Point], Optional[Point]]:
    """Decode ``(od_center, fovea)`` from a heatmap pair; ``None`` when a channel peaks below ``tau_det``."""
    hm = np.asarray(hm)
    if hm.ndim != 3 or hm.shape[0] != 2:
        raise ValueError(f"expected a [2, h, w] heatmap pair, got {hm.shape}")
    return decode_channel(hm[0], tau_det), decode_channel(hm[1], tau_det)


@dataclass(frozen=True)
class FoveaPrior:
    """Typical OD-to-fovea displacement, in units of OD diameter."""

    temporal: float = 2.5
    inferior: float = 0.3


def fallback_fovea(
    od_center: Optional[Sequence[float]],
    od_diameter_px: float,
    image_size: tuple[int, int],
    prior: FoveaPrior = FoveaPrior(),
) -> Optional[Point]:
    """Estimate the fovea from the OD centre when the fovea itself was not detected.

    The fovea sits on the side of the image midline opposite to the disc; a
    disc exactly on the midline is displaced to the right.
    """
    if od_center is None:
        return None
    if not od_diameter_px > 0:
        raise ValueError("od_diameter_px must be positive")
    h, w = image_size
    ox, oy = float(od_center[0]), float(od_center[1])
    midline = (w - 1) / 2.0
    direction = 1.0 if ox <= midline else -1.0
    x = ox + direction * prior.temporal * od_diameter_px
    y = oy + prior.inferior * od_diameter_px
    return Point(min(max(x, 0.0), w - 1.0), min(max(y, 0.0), h - 1.0))


@dataclass(frozen=True)
class AxisMap:
    """Axis-aligned frame change ``dst = (src - origin) * scale``."""

    x0: float = 0.0
    y0: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def forward(self, p):
        return Point((p[0] - self.x0) * self.sx, (p[1] - self.y0) * self.sy)

    def inverse(self, p):
        return Point(p[0] / self.sx + self.x0, p[1] / self.sy + self.y0)

    def inverted(self) -> "AxisMap":
        return AxisMap(-self.x0 * self.sx, -self.y0 * self.sy, 1.0 / self.sx, 1.0 / self.sy)

    def then(self, other: "AxisMap") -> "AxisMap":
        """The map applying ``self`` first and ``other`` second."""
        return AxisMap(
            x0=self.x0 + other.x0 / self.sx,
            y0=self.y0 + other.y0 / self.sy,
            sx=self.sx * other.sx,
            sy=self.sy * other.sy,
        )

    def source_grid(self, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
        """Source-frame sample positions ``(xs, ys)`` for every destination pixel."""
        xs = self.x0 + np.arange(out_w, dtype=np.float64) / self.sx
        ys = self.y0 + np.arange(out_h, dtype=np.float64) / self.sy
        return xs, ys


@dataclass(frozen=True)
class RoiCrop:
    """Square crop of side ``side_px`` around ``center``, resized to ``resize_to``.

    The window is shifted inward at the image borders so its side is preserved;
    only a source smaller than the window gets (symmetric) zero padding.
    """

    center: Point
    side_px: int
    src_size: tuple[int, int]
    resize_to: int

    def __post_init__(self):
        if self.side_px <= 0 or self.resize_to <= 0:
            raise ValueError("crop side and resize target must be positive")

    @property
    def origin(self) -> tuple[int, int]:
        h, w = self.src_size
        return (
            _clamped_origin(self.center[0], self.side_px, w),
            _clamped_origin(self.center[1], self.side_px, h),
        )

    @property
    def scale(self) -> float:
        return self.resize_to / self.side_px

    @property
    def axis_map(self) -> AxisMap:
        x0, y0 = self.origin
        return AxisMap(float(x0), float(y0), self.scale, self.scale)

    def contains(self, p) -> bool:
        x0, y0 = self.origin
        return x0 <= p[0] < x0 + self.side_px and y0 <= p[1] < y0 + self.side_px


def _clamped_origin(c: float, side: int, extent: int) -> int:
    if side > extent:
        return -((side - extent) // 2)
    start = int(math.floor(c - side / 2.0 + 0.5))
    return min(max(start, 0), extent - side)


def crop_forward(p, roi: RoiCrop) -> Point:
    return roi.axis_map.forward(p)


def crop_inverse(p, roi: RoiCrop) -> Point:
    return roi.axis_map.inverse(p)
