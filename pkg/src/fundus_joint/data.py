"""Fundus samples, dataset adapters, field-of-view cropping, resizing and augmentation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .geometry import AxisMap, Point, as_point, make_heatmap_pair
from .imaging import resize_map, sample_points, warp

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["id", "image", "mask", "fovea_x", "fovea_y", "od_x", "od_y"]
# on-disk mask convention: 0 background, 128 disc, 255 cup
MASK_VALUES = {0: 0, 1: 128, 2: 255}


def to_float(u8: np.ndarray) -> np.ndarray:
    return (np.asarray(u8, dtype=np.float64) / 255.0).astype(np.float32)


@dataclass
class FundusSample:
    image: np.ndarray  # [3, h, w] float32 in [0, 1]
    mask: Optional[np.ndarray]  # [h, w] uint8 labels {0 bg, 1 OD, 2 OC}; None if missing
    fovea: Optional[Point]
    od_center: Optional[Point]
    id: str
    source: str = "manifest"
    oc_absent: bool = False
    frame: AxisMap = field(default_factory=AxisMap)  # original image -> current frame
    original_size: Optional[tuple[int, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.original_size is None:
            self.original_size = tuple(self.image.shape[1:])
        self.fovea = as_point(self.fovea)
        self.od_center = as_point(self.od_center)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.image.shape[1:])

    def heatmaps(self, sigma: float) -> np.ndarray:
        h, w = self.size
        return make_heatmap_pair(self.od_center, self.fovea, h, w, sigma)

    def to_original(self, p) -> Optional[Point]:
        return None if p is None else self.frame.inverse(p)


def _inside(p: Optional[Point], h: int, w: int) -> Optional[Point]:
    if p is None or not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
        return None
    return p


def apply_axis_map(sample: FundusSample, amap: AxisMap, out_h: int, out_w: int) -> FundusSample:
    """Resample image (bilinear) and mask (nearest) into a new frame; coordinates follow exactly."""
    img = warp(sample.image, amap, out_h, out_w, order=1)
    mask = None if sample.mask is None else warp(sample.mask, amap, out_h, out_w, order=0)
    fov = _inside(None if sample.fovea is None else amap.forward(sample.fovea), out_h, out_w)
    od = _inside(None if sample.od_center is None else amap.forward(sample.od_center), out_h, out_w)
    return replace(sample, image=img, mask=mask, fovea=fov, od_center=od,
                   frame=sample.frame.then(amap))


# ---------------------------------------------------------------------------
# field of view, resizing


@dataclass(frozen=True)
class Rect:
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


def fov_rect(image: np.ndarray) -> tuple[Rect, bool]:
    """Bounding box of the camera's field of view; ``ok`` is False when none was found.

    Otsu threshold on the red channel, then the largest connected component.
    """
    red = np.asarray(image[0], dtype=np.float64)
    h, w = red.shape
    full = Rect(0, 0, w, h)
    if red.max() - red.min() < 1e-6:
        return full, bool(red.max() > 0.02)
    fg = red > threshold_otsu(red)
    labels, n = ndimage.label(fg)
    if n == 0:
        return full, False
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
    rows, cols = np.nonzero(labels == int(np.argmax(sizes)) + 1)
    return Rect(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1), True


def fov_crop(image: np.ndarray) -> tuple[np.ndarray, Rect, bool]:
    rect, ok = fov_rect(image)
    return image[:, rect.y0 : rect.y1, rect.x0 : rect.x1], rect, ok


def fov_crop_sample(sample: FundusSample) -> FundusSample:
    rect, ok = fov_rect(sample.image)
    if not ok:
        log.warning("no field of view found in %s; keeping the full frame", sample.id)
    amap = AxisMap(float(rect.x0), float(rect.y0), 1.0, 1.0)
    out = apply_axis_map(sample, amap, rect.height, rect.width)
    out.meta = dict(sample.meta, fov_rect=rect, fov_ok=ok)
    return out


def standardize(sample: FundusSample, size: int = 224) -> FundusSample:
    """Resize to ``size x size``: bilinear image, nearest mask, scaled coordinates."""
    h, w = sample.size
    return apply_axis_map(sample, resize_map(h, w, size, size), size, size)


def prepare(sample: FundusSample, size: int = 224) -> FundusSample:
    """Field-of-view crop followed by resizing to the model size."""
    return standardize(fov_crop_sample(sample), size)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    color_jitter: float = 0.1
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotate_deg: float = 15.0
    gamma_noise: float = 0.2
    scale_range: tuple[float, float] = (1 / 1.1, 1.1)
    seed: int = 0


def _color(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    j = cfg.color_jitter
    bright, contrast, sat = 1.0 + rng.uniform(-j, j, size=3) if j > 0 else (1.0, 1.0, 1.0)
    gamma = 1.0 + rng.uniform(-cfg.gamma_noise, cfg.gamma_noise) if cfg.gamma_noise > 0 else 1.0
    out = img * bright
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=0, keepdims=True)
    out = gray + (out - gray) * sat
    out = np.clip(out, 0.0, 1.0) ** gamma
    return out.astype(np.float32)


def augment(sample: FundusSample, cfg: AugmentConfig, rng: np.random.Generator) -> FundusSample:
    """Random colour jitter, flips, rotation, gamma and rescaling.

    Geometric operations are combined into a single affine map about the image
    centre and applied identically to image, mask and landmarks. Landmarks
    leaving the image become absent. Heatmaps are rebuilt from coordinates
    afterwards, never warped.
    """
    h, w = sample.size
    hflip = rng.random() < cfg.flip_prob
    vflip = rng.random() < cfg.flip_prob
    rotate = rng.random() < cfg.rotate_prob
    angle = math.radians(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)) if rotate else 0.0
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo

    flip = np.diag([-1.0 if hflip else 1.0, -1.0 if vflip else 1.0])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    mat = scale * rot @ flip  # acts on (x, y) offsets from the centre
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    img = _color(sample.image, cfg, rng)
    if np.allclose(mat, np.eye(2)):
        return replace(sample, image=img)

    inv = np.linalg.inv(mat)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    off = np.stack([xx - centre[0], yy - centre[1]], axis=-1) @ inv.T
    src_x, src_y = off[..., 0] + centre[0], off[..., 1] + centre[1]
    if hflip and not rotate and scale == 1.0:
        src_x = np.rint(src_x)
    if vflip and not rotate and scale == 1.0:
        src_y = np.rint(src_y)
    img = sample_points(img, src_x, src_y, order=1).astype(np.float32)
    mask = None if sample.mask is None else sample_points(sample.mask, src_x, src_y, order=0)

    def fwd(p):
        if p is None:
            return None
        q = mat @ (np.asarray(p, dtype=np.float64) - centre) + centre
        return _inside(Point(float(q[0]), float(q[1])), h, w)

    return replace(sample, image=img, mask=mask, fovea=fwd(sample.fovea), od_center=fwd(sample.od_center),
                   meta=dict(sample.meta, augment=dict(hflip=hflip, vflip=vflip, angle=angle, scale=scale)))


# ---------------------------------------------------------------------------
# reading and writing


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return to_float(arr.transpose(2, 0, 1))


def read_mask(path: Path, convention: str = "manifest") -> np.ndarray:
    """Read an 8-bit mask and convert it to labels {0 bg, 1 OD, 2 OC}.

    ``manifest``: 0 bg / 128 disc / 255 cup. ``cup0``: the challenge release
    convention 0 cup / 128 disc rim / 255 bg. ``disc0``: 0 disc / 255 bg.
    """
    with Image.open(path) as im:
        v = np.asarray(im.convert("L")).astype(np.int32)
    labels = np.zeros(v.shape, dtype=np.uint8)
    if convention == "manifest":
        labels[(v >= 64) & (v < 192)] = 1
        labels[v >= 192] = 2
    elif convention == "cup0":
        labels[v < 64] = 2
        labels[(v >= 64) & (v < 192)] = 1
    elif convention == "disc0":
        labels[v < 128] = 1
    else:
        raise ValueError(f"unknown mask convention {convention!r}")
    return labels


def write_mask(path: Path, labels: np.ndarray) -> None:
    out = np.zeros(labels.shape, dtype=np.uint8)
    for lab, val in MASK_VALUES.items():
        out[labels == lab] = val
    Image.fromarray(out, mode="L").save(path)


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def _num(text: str) -> Optional[float]:
    text = (text or "").strip()
    return float(text) if text else None


def _point(x: str, y: str) -> Optional[Point]:
    fx, fy = _num(x), _num(y)
    if fx is None or fy is None:
        return None
    return Point(fx, fy)


def mask_centroid(labels: Optional[np.ndarray]) -> Optional[Point]:
    if labels is None:
        return None
    rows, cols = np.nonzero(labels >= 1)
    if rows.size == 0:
        return None
    return Point(float(cols.mean()), float(rows.mean()))


@dataclass
class LoadReport:
    loaded: int = 0
    problems: list[tuple[str, str]] = field(default_factory=list)

    def add(self, sample_id: str, problem: str) -> None:
        log.warning("%s: %s", sample_id, problem)
        self.problems.append((sample_id, problem))


def read_manifest(root: str | os.PathLike, name: str = "manifest.csv", mask_convention: str = "manifest",
                  source: str = "manifest", oc_absent: bool = False,
                  report: Optional[LoadReport] = None) -> list[FundusSample]:
    root = Path(root)
    report = report if report is not None else LoadReport()
    samples = []
    with open(root / name, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"manifest missing columns {sorted(missing)}")
        for row in reader:
            sid = row["id"]
            try:
                image = read_image(root / row["image"])
            except (OSError, ValueError) as exc:
                report.add(sid, f"unreadable image {row['image']!r}: {exc}")
                continue
            mask = None
            if row["mask"].strip():
                try:
                    mask = read_mask(root / row["mask"], mask_convention)
                except (OSError, ValueError) as exc:
                    report.add(sid, f"unreadable mask {row['mask']!r}: {exc}")
            else:
                report.add(sid, "no mask")
            fovea = _point(row["fovea_x"], row["fovea_y"])
            od = _point(row["od_x"], row["od_y"])
            if od is None:
                od = mask_centroid(mask)
            samples.append(FundusSample(image=image, mask=mask, fovea=fovea, od_center=od, id=sid,
                                        source=source, oc_absent=oc_absent))
            report.loaded += 1
    return sorted(samples, key=lambda s: s.id)


def write_manifest(samples: list[FundusSample], root: str | os.PathLike, name: str = "manifest.csv") -> Path:
    """Export samples as PNG images/masks plus a manifest table."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(root / name, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            img_rel = f"images/{s.id}.png"
            write_image(root / img_rel, s.image)
            mask_rel = ""
            if s.mask is not None:
                mask_rel = f"masks/{s.id}.png"
                write_mask(root / mask_rel, s.mask)
            fx, fy = (None, None) if s.fovea is None else s.fovea
            ox, oy = (None, None) if s.od_center is None else s.od_center
            writer.writerow([s.id, img_rel, mask_rel, fmt(fx), fmt(fy), fmt(ox), fmt(oy)])
    return root / name


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _find_dir(root: Path, *names: str) -> Optional[Path]:
    for n in names:
        for cand in (root / n, root / n.lower(), root / n.capitalize()):
            if cand.is_dir():
                return cand
    return None


def _coord_table(root: Path) -> dict[str, tuple[str, str]]:
    """Fovea coordinates from the first ``*.csv`` in ``root`` with X/Y columns."""
    for path in sorted(root.glob("*.csv")):
        with open(path, newline="", encoding="utf-8-sig") as fh:
            reader = csv.DictReader(fh)
            cols = {c.lower().replace(" ", "_"): c for c in (reader.fieldnames or [])}
            key = next((cols[c] for c in ("id", "imgname", "data", "filename", "image", "name") if c in cols), None)
            xk = next((cols[c] for c in ("fovea_x", "x") if c in cols), None)
            yk = next((cols[c] for c in ("fovea_y", "y") if c in cols), None)
            if key and xk and yk:
                return {Path(r[key]).stem: (r[xk], r[yk]) for r in reader}
    return {}


def convert_layout(root: str | os.PathLike, layout: str, out: Optional[str | os.PathLike] = None) -> Path:
    """Write a canonical manifest for a challenge-style directory.

    Expected layout: ``images/`` with the photographs, ``masks/`` with
    same-stem masks in the challenge convention (GAMMA/REFUGE: 0 cup,
    128 rim, 255 background; PALM: 0 disc, 255 background) and a CSV with
    fovea coordinates (id/ImgName column plus Fovea_X/Fovea_Y). Masks are
    re-encoded into the manifest convention under ``<out>/labels``, leaving
    the originals untouched.
    """
    root = Path(root)
    out = Path(out) if out is not None else root
    conv = {"gamma": "cup0", "refuge": "cup0", "palm": "disc0"}[layout]
    img_dir = _find_dir(root, "images", "Images")
    if img_dir is None:
        raise FileNotFoundError(f"no images/ directory under {root}")
    mask_dir = _find_dir(root, "masks", "Masks", "Disc_Cup_Masks", "Disc_Masks")
    coords = _coord_table(root)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        stem = img.stem
        mask_rel = ""
        if mask_dir is not None:
            cands = [p for p in mask_dir.glob(stem + ".*") if p.suffix.lower() in IMAGE_SUFFIXES]
            if cands:
                labels = read_mask(cands[0], conv)
                mask_rel = f"labels/{stem}.png"
                write_mask(out / mask_rel, labels)
        fx, fy = coords.get(stem, ("", ""))
        rows.append([stem, os.path.relpath(img, out), mask_rel, fx, fy, "", ""])
    path = out / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return path


def load_dataset(root: str | os.PathLike, layout: str = "manifest",
                 report: Optional[LoadReport] = None) -> list[FundusSample]:
    """Load ``root`` as ``manifest``, ``gamma``, ``refuge`` or ``palm``.

    Challenge layouts are converted to a manifest first (written next to the
    data). PALM samples carry no cup annotation and are flagged ``oc_absent``.
    Missing disc centres are taken as the disc mask centroid.
    """
    layout = layout.lower()
    if layout == "manifest":
        return read_manifest(root, report=report)
    if layout not in ("gamma", "refuge", "palm"):
        raise ValueError(f"unknown layout {layout!r}")
    convert_layout(root, layout)
    return read_manifest(root, source=layout, oc_absent=(layout == "palm"), report=report)


def kfold_indices(n: int, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded k-fold split as ``(train_idx, test_idx)`` pairs."""
    from sklearn.model_selection import KFold

    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} non-empty folds")
    folds = KFold(n_splits=k, shuffle=True, random_state=seed)
    return [(tr, te) for tr, te in folds.split(np.arange(n))]
