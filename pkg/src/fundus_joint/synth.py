"""Deterministic synthetic fundus photographs with exact ground truth.

Each sample has a circular field of view, a bright elliptical optic disc with a
concentric cup, a dark vessel tree rooted at the disc, and a dark fovea about
2.5 disc diameters from the disc towards the image centre. Images are 8-bit
quantised so they survive a PNG round trip unchanged.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import FundusSample, to_float
from .geometry import Point


def _ellipse(h: int, w: int, cx: int, cy: int, a: float, b: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _vessel_tree(h: int, w: int, root: tuple[float, float], toward: float, od_diam: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Rasterised branching random walks starting at the disc centre."""
    trunks = np.zeros((h, w), dtype=bool)
    branches = np.zeros((h, w), dtype=bool)
    step = max(1.0, 0.02 * min(h, w))
    arcades = [toward - 0.6, toward + 0.6, toward + math.pi - 0.5, toward + math.pi + 0.5]
    stack = [(root[0], root[1], ang + rng.normal(0, 0.1), 0) for ang in arcades]
    limit = int(1.2 * min(h, w) / step)
    while stack:
        x, y, ang, depth = stack.pop()
        canvas = trunks if depth == 0 else branches
        bend = rng.choice([-1.0, 1.0]) * 0.04
        for _ in range(limit):
            x += step * math.cos(ang)
            y += step * math.sin(ang)
            ang += bend + rng.normal(0, 0.08)
            if not (0 <= x < w and 0 <= y < h):
                break
            if math.hypot(x - root[0], y - root[1]) < 0.5 * od_diam:
                continue
            canvas[int(y), int(x)] = True
            if depth < 2 and rng.random() < 0.06:
                stack.append((x, y, ang + rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 0.9), depth + 1))
    if min(h, w) >= 128:
        trunks = ndimage.binary_dilation(trunks)
    return trunks | branches


def synth_one(rng: np.random.Generator, size: int | Sequence[int], sample_id: str) -> FundusSample:
    h, w = (size, size) if np.isscalar(size) else (int(size[0]), int(size[1]))
    s = min(h, w)
    fov_r = 0.46 * s
    fcx = (w - 1) / 2.0 + rng.uniform(-0.01, 0.01) * s
    fcy = (h - 1) / 2.0 + rng.uniform(-0.01, 0.01) * s
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fov = (xx - fcx) ** 2 + (yy - fcy) ** 2 <= fov_r**2

    # disc geometry: integer centre and vertical semi-axis so vertical extents are exact
    b_od = max(3, int(round(rng.uniform(0.075, 0.09) * s)))
    a_od = b_od * rng.uniform(0.9, 1.0)
    diam = a_od + b_od
    side = rng.choice([-1.0, 1.0])  # disc left (-1) or right (+1) of centre
    od_x = int(round(fcx + side * 1.25 * diam * rng.uniform(0.95, 1.05)))
    od_y = int(round(fcy + rng.uniform(-0.04, 0.04) * s - 0.15 * diam))
    area_ratio = rng.uniform(0.2, 0.6)
    k = math.sqrt(area_ratio)
    b_oc = max(1, int(round(b_od * k)))
    a_oc = max(1.0, a_od * k)
    disc = _ellipse(h, w, od_x, od_y, a_od, b_od)
    cup = _ellipse(h, w, od_x, od_y, a_oc, b_oc) & disc

    fov_x = od_x - side * 2.5 * diam + rng.normal(0, 0.05) * diam
    fov_y = od_y + 0.3 * diam + rng.normal(0, 0.05) * diam

    # background retina: orange with low-frequency texture and vignetting
    tex = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), sigma=max(1.0, s / 16))
    tex = tex / (np.abs(tex).max() + 1e-9)
    rad = np.sqrt((xx - fcx) ** 2 + (yy - fcy) ** 2) / fov_r
    base = 0.85 - 0.25 * rad**2 + 0.05 * tex
    img = np.stack([0.80 * base, 0.38 * base, 0.16 * base])

    # macula / fovea: dark smooth blob
    fov_sig = 0.45 * diam
    blob = np.exp(-((xx - fov_x) ** 2 + (yy - fov_y) ** 2) / (2 * fov_sig**2))
    img *= 1.0 - 0.45 * blob

    vessels = _vessel_tree(h, w, (od_x, od_y), math.atan2(fov_y - od_y, fov_x - od_x), diam, rng)
    vessels &= fov
    img[:, vessels] *= np.array([0.55, 0.45, 0.5])[:, None]

    soft = lambda m: ndimage.gaussian_filter(m.astype(np.float64), 0.6)
    img += np.array([0.18, 0.30, 0.20])[:, None, None] * soft(disc)
    img += np.array([0.10, 0.22, 0.20])[:, None, None] * soft(cup)
    img += rng.normal(0, 0.01, img.shape)
    img *= fov
    img = to_float(np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8))

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[disc] = 1
    mask[cup] = 2
    meta = {
        "vcdr": (2 * b_oc + 1) / (2 * b_od + 1),
        "area_ratio": area_ratio,
        "od_diameter": diam,
        "fov_center": (fcx, fcy),
        "fov_radius": fov_r,
        "vessels": vessels,
    }
    fov_pt = Point(float(np.clip(fov_x, 0, w - 1)), float(np.clip(fov_y, 0, h - 1)))
    return FundusSample(
        image=img,
        mask=mask,
        fovea=fov_pt,
        od_center=Point(float(od_x), float(od_y)),
        id=sample_id,
        source="synthetic",
        meta=meta,
    )


def synth_fundus(seed: int, n: int, size: int | Sequence[int] = 64) -> list[FundusSample]:
    """``n`` synthetic samples; the same ``(seed, n, size)`` always yields identical data."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return [
        synth_one(np.random.default_rng([seed, i]), size, f"synth_{seed}_{i:04d}") for i in range(n)
    ]
