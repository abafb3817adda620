"""Coarse-to-fine inference and the crop plumbing shared with fine-stage training.

Frames: the *original* frame is the image as loaded; the *coarse* frame is the
model-sized image after field-of-view cropping and resizing
(``sample.frame`` maps original to coarse). Fine crops are cut from the
original image, so fine outputs map back to it exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np
import torch
from torch import nn

from .coarse import (CoarseOutput, JointSegDetNet, label_from_probs, label_to_channels,
                     od_box_center, postprocess_coarse)
from .config import TrainConfig
from .data import FundusSample, prepare, standardize
from .fine import (FineInput, FineLocNet, FineSegNet, build_flm_input, build_fsm_input, crop_from_frame,
                   flm_forward, fsm_forward, fuse_fovea, paste_labels)
from .geometry import AxisMap, Point, RoiCrop, make_heatmap
from .imaging import normalize_channels, warp
from .metrics import MetricRecord, evaluate_sample

CoarseFn = Union[JointSegDetNet, Callable[[np.ndarray], tuple]]
FsmFn = Union[FineSegNet, Callable[[FineInput], np.ndarray]]
FlmFn = Union[FineLocNet, Callable[[FineInput], tuple]]


@dataclass
class Models:
    """Trained networks, or any callables with the same contract (used for oracle tests).

    ``coarse(x)`` takes a normalised ``[3, s, s]`` image and returns
    ``(heat [2,s,s] | None, probs [3,s,s] | None)``; ``fsm(inp)`` returns
    ``[3, s, s]`` probabilities; ``flm(inp)`` returns ``(c_reg, heat)``.
    """

    coarse: CoarseFn
    fsm: Optional[FsmFn] = None
    flm: Optional[FlmFn] = None

    def eval(self) -> "Models":
        for m in (self.coarse, self.fsm, self.flm):
            if isinstance(m, nn.Module):
                m.eval()
        return self


def prepare_for(sample: FundusSample, cfg: TrainConfig) -> FundusSample:
    if cfg.preprocess:
        return prepare(sample, cfg.input_size)
    return standardize(sample, cfg.input_size)


@torch.no_grad()
def run_coarse(coarse: CoarseFn, prepared: FundusSample, cfg: TrainConfig) -> CoarseOutput:
    x = normalize_channels(prepared.image)
    if isinstance(coarse, nn.Module):
        heat, probs = coarse(torch.from_numpy(x)[None])
        heat = None if heat is None else heat[0].numpy()
        probs = None if probs is None else probs[0].numpy()
    else:
        heat, probs = coarse(x)
    return postprocess_coarse(heat, probs, cfg.tau_det, cfg.fovea_prior())


@dataclass
class Guide:
    """Coarse-stage evidence (in the coarse frame) that drives the fine stage."""

    heat: np.ndarray  # [2, s, s]; zeros where unavailable
    labels: np.ndarray  # [s, s]
    od_center: Optional[Point]  # from the heatmap
    fovea: Optional[Point]
    frame: AxisMap  # original -> coarse

    def od_crop_center(self) -> Point:
        """Disc-box centre, else heatmap disc centre, else image centre; original frame."""
        c = od_box_center(self.labels)
        if c is None:
            c = self.od_center
        if c is None:
            s = self.labels.shape[0]
            c = Point((s - 1) / 2.0, (s - 1) / 2.0)
        return self.frame.inverse(c)

    def fovea_crop_center(self) -> Optional[Point]:
        return None if self.fovea is None else self.frame.inverse(self.fovea)


def guide_from_truth(prepared: FundusSample, cfg: TrainConfig) -> Guide:
    s = prepared.size[0]
    labels = prepared.mask if prepared.mask is not None else np.zeros(prepared.size, np.uint8)
    return Guide(prepared.heatmaps(cfg.sigma(s)).astype(np.float32), labels, prepared.od_center,
                 prepared.fovea, prepared.frame)


def guide_from_output(out: CoarseOutput, frame: AxisMap) -> Guide:
    s = out.labels.shape
    heat = out.heat if out.heat is not None else np.zeros((2,) + s, np.float32)
    return Guide(heat, out.labels, out.od_center, out.fovea, frame)


def jitter(cfg: TrainConfig, sample_id: str, side: int, salt: str) -> np.ndarray:
    """Fixed per-sample crop offset for teacher forcing (same every epoch and at evaluation)."""
    if cfg.crop_jitter <= 0:
        return np.zeros(2)
    key = zlib.crc32(f"{salt}:{sample_id}".encode())
    rng = np.random.default_rng([cfg.seed, key])
    return rng.uniform(-1.0, 1.0, size=2) * cfg.crop_jitter * side


def od_roi(sample: FundusSample, guide: Guide, cfg: TrainConfig, teacher: bool = False) -> RoiCrop:
    c = np.asarray(guide.od_crop_center(), dtype=np.float64)
    if teacher:
        c = c + jitter(cfg, sample.id, cfg.od_crop, "od")
    return RoiCrop(Point(*c), cfg.od_crop, sample.size, cfg.input_size)


def fovea_roi(sample: FundusSample, guide: Guide, cfg: TrainConfig, teacher: bool = False) -> Optional[RoiCrop]:
    c = guide.fovea_crop_center()
    if c is None:
        return None
    c = np.asarray(c, dtype=np.float64)
    if teacher:
        c = c + jitter(cfg, sample.id, cfg.fovea_crop, "fovea")
    return RoiCrop(Point(*c), cfg.fovea_crop, sample.size, cfg.input_size)


def fsm_input(image: np.ndarray, guide: Guide, roi: RoiCrop, cfg: TrainConfig) -> FineInput:
    labels_crop = crop_from_frame(guide.labels, guide.frame, roi, order=0)
    return build_fsm_input(image, labels_crop, roi, cfg.fsm_dilation, cfg.fsm_masked)


def flm_input(image: np.ndarray, guide: Guide, roi: RoiCrop) -> FineInput:
    heat_crop = crop_from_frame(guide.heat[1], guide.frame, roi, order=1)
    return build_flm_input(image, heat_crop.astype(np.float32), roi)


def fsm_target(sample: FundusSample, roi: RoiCrop) -> np.ndarray:
    s = roi.resize_to
    return label_to_channels(warp(sample.mask, roi.axis_map, s, s, order=0))


def flm_target(sample: FundusSample, roi: RoiCrop, cfg: TrainConfig) -> Optional[tuple[Point, np.ndarray]]:
    """Fovea in crop pixels and its heatmap; ``None`` if the fovea is absent or outside the crop."""
    if sample.fovea is None or not roi.contains(sample.fovea):
        return None
    c = roi.axis_map.forward(sample.fovea)
    s = roi.resize_to
    if not (0 <= c.x < s and 0 <= c.y < s):
        return None
    return c, make_heatmap(c, s, s, cfg.sigma(s)).astype(np.float32)


def _fsm_probs(fsm: FsmFn, inp: FineInput) -> np.ndarray:
    if isinstance(fsm, nn.Module):
        return fsm_forward(fsm, inp)[0]
    return np.asarray(fsm(inp))


def _flm_out(flm: FlmFn, inp: FineInput) -> tuple[Point, np.ndarray]:
    if isinstance(flm, nn.Module):
        return flm_forward(flm, inp)
    c, heat = flm(inp)
    return Point(float(c[0]), float(c[1])), np.asarray(heat)


@dataclass
class FineResult:
    labels: Optional[np.ndarray] = None  # original frame
    fovea: Optional[Point] = None  # original frame
    intermediates: dict = field(default_factory=dict)


def run_fine(models: Models, sample: FundusSample, guide: Guide, cfg: TrainConfig,
             teacher: bool = False) -> FineResult:
    """FSM and FLM on crops of ``sample`` (original frame) placed by ``guide``."""
    res = FineResult()
    image = normalize_channels(sample.image)
    if models.fsm is not None:
        roi = od_roi(sample, guide, cfg, teacher)
        inp = fsm_input(image, guide, roi, cfg)
        probs = _fsm_probs(models.fsm, inp)
        crop_labels = label_from_probs(probs)
        res.labels = paste_labels(crop_labels, roi, sample.size)
        res.intermediates.update(od_roi=roi, fsm_input=inp.x, fsm_probs=probs, fsm_labels=crop_labels)
    if models.flm is not None:
        roi = fovea_roi(sample, guide, cfg, teacher)
        if roi is not None:
            inp = flm_input(image, guide, roi)
            c_reg, heat = _flm_out(models.flm, inp)
            fused = fuse_fovea(c_reg, heat, cfg.d_flm)
            res.fovea = roi.axis_map.inverse(fused)
            res.intermediates.update(fovea_roi=roi, flm_input=inp.x, flm_heat=heat, c_reg=c_reg,
                                     c_fused=fused)
    return res


@dataclass
class PipelineResult:
    labels: np.ndarray  # final label map, original frame
    fovea: Optional[Point]
    od_center: Optional[Point]
    degraded: bool
    coarse: CoarseOutput  # coarse frame
    coarse_labels: np.ndarray  # coarse labels mapped to the original frame
    coarse_fovea: Optional[Point]
    intermediates: dict = field(default_factory=dict)


def to_original(labels: np.ndarray, frame: AxisMap, size: tuple[int, int]) -> np.ndarray:
    return warp(labels, frame.inverted(), size[0], size[1], order=0)


def infer_pipeline(image: np.ndarray, models: Models, cfg: TrainConfig, sample_id: str = "image") -> PipelineResult:
    """Coarse stage, then fine segmentation and localisation on crops it places.

    When the coarse stage finds neither disc nor fovea (or no field of view),
    the fine stage is skipped and the coarse result is returned with
    ``degraded=True``.
    """
    sample = FundusSample(np.asarray(image, dtype=np.float32), None, None, None, sample_id)
    prepared = prepare_for(sample, cfg)
    out = run_coarse(models.coarse, prepared, cfg)
    frame = prepared.frame
    coarse_labels = to_original(out.labels, frame, sample.size)
    coarse_fovea = sample_to_orig(out.fovea, frame)
    od_center = sample_to_orig(out.od_center, frame)
    has_disc = od_box_center(out.labels) is not None or out.od_center is not None
    degraded = not prepared.meta.get("fov_ok", True) or not (has_disc or out.fovea is not None)
    inter: dict[str, Any] = dict(prepared_image=prepared.image, coarse_frame=frame)
    labels, fovea = coarse_labels, coarse_fovea
    if not degraded:
        guide = guide_from_output(out, frame)
        fine = run_fine(models, sample, guide, cfg)
        inter.update(fine.intermediates)
        if fine.labels is not None and has_disc:
            labels = fine.labels
        if fine.fovea is not None:
            fovea = fine.fovea
    return PipelineResult(labels, fovea, od_center, degraded, out, coarse_labels, coarse_fovea, inter)


def sample_to_orig(p: Optional[Point], frame: AxisMap) -> Optional[Point]:
    return None if p is None else frame.inverse(p)


def evaluate(models: Models, samples: list[FundusSample], cfg: TrainConfig,
             teacher: bool = False) -> tuple[list[MetricRecord], list[MetricRecord]]:
    """Coarse and fine metric records in each sample's original frame.

    ``teacher=True`` places fine crops from ground truth (with the fixed
    training jitter) instead of from the coarse output.
    """
    models.eval()
    coarse_recs, fine_recs = [], []
    for s in samples:
        prepared = prepare_for(s, cfg)
        out = run_coarse(models.coarse, prepared, cfg) if models.coarse is not None else None
        if out is not None:
            c_labels = to_original(out.labels, prepared.frame, s.size) if out.probs is not None else None
            coarse_recs.append(evaluate_sample(
                s.id, c_labels, s.mask if c_labels is not None else None,
                sample_to_orig(out.fovea, prepared.frame) if out.heat is not None else None,
                s.fovea if out.heat is not None else None,
                sample_to_orig(out.od_center, prepared.frame), s.od_center if out.heat is not None else None,
                oc_absent=s.oc_absent))
        if models.fsm is None and models.flm is None:
            continue
        guide = guide_from_truth(prepared, cfg) if teacher or out is None else guide_from_output(out, prepared.frame)
        fine = run_fine(models, s, guide, cfg, teacher=teacher)
        fine_recs.append(evaluate_sample(
            s.id, fine.labels, s.mask if fine.labels is not None else None,
            fine.fovea, s.fovea if models.flm is not None else None, oc_absent=s.oc_absent))
    return coarse_recs, fine_recs
