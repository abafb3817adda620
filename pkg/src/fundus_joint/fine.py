"""Fine stage: disc/cup refinement on a disc-centred crop and fovea refinement on a fovea-centred crop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, Decoder, Encoder
from .coarse import OC, OD, label_from_probs
from .geometry import AxisMap, Point, RoiCrop, argmax_point
from .imaging import dilate, warp

FSM_CHANNELS = 5  # masked RGB, OC, OD
FLM_CHANNELS = 4  # RGB, fovea heat


class FineSegNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, in_ch=FSM_CHANNELS)
        self.decoder = Decoder(cfg, out_ch=3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != FSM_CHANNELS:
            raise ValueError(f"fine segmentation expects {FSM_CHANNELS} channels, got {x.shape[1]}")
        return torch.sigmoid(self.decoder(self.encoder(x)))


class FineLocNet(nn.Module):
    """Heatmap decoder plus a coordinate regression head on the flattened bottleneck.

    The regression head sees the whole bottleneck grid (not a pooled vector)
    because the windowed attention blocks carry no absolute position.
    """

    def __init__(self, cfg: BackboneConfig, hidden: int = 256):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, in_ch=FLM_CHANNELS)
        self.decoder = Decoder(cfg, out_ch=1)
        gh, gw = cfg.stage_grids[3]
        flat = gh * gw * cfg.stage_dims[3]
        self.regress = nn.Sequential(nn.LayerNorm(flat), nn.Linear(flat, hidden), nn.GELU(), nn.Linear(hidden, 2))

    def forward(self, x: torch.Tensor):
        """Return ``(coords, heat)``: ``(B, 2)`` (x, y) in crop pixels and ``(B, h, w)`` in [0, 1]."""
        if x.shape[1] != FLM_CHANNELS:
            raise ValueError(f"fine localisation expects {FLM_CHANNELS} channels, got {x.shape[1]}")
        feats = self.encoder(x)
        heat = torch.sigmoid(self.decoder(feats))[:, 0]
        h, w = self.cfg.input_size
        unit = torch.sigmoid(self.regress(feats[3].flatten(1)))
        coords = unit * torch.tensor([w - 1, h - 1], dtype=unit.dtype, device=unit.device)
        return coords, heat


def fuse_fovea(c_reg, heat: np.ndarray, d_flm: float = 30.0) -> Point:
    """Average regression and heatmap estimates when they agree within ``d_flm``, else keep the regression."""
    c_reg = Point(float(c_reg[0]), float(c_reg[1]))
    heat = np.asarray(heat)
    if not heat.max() > 0:
        return c_reg
    c_heat, _ = argmax_point(heat)
    if np.hypot(c_reg.x - c_heat.x, c_reg.y - c_heat.y) > d_flm:
        return c_reg
    return Point((c_reg.x + c_heat.x) / 2.0, (c_reg.y + c_heat.y) / 2.0)


@dataclass
class FineInput:
    x: np.ndarray  # [channels, s, s]
    roi: RoiCrop


def crop_image(image: np.ndarray, roi: RoiCrop) -> np.ndarray:
    s = roi.resize_to
    return warp(image, roi.axis_map, s, s, order=1)


def crop_from_frame(grid: np.ndarray, frame: AxisMap, roi: RoiCrop, order: int) -> np.ndarray:
    """Resample a map living in ``frame`` (original -> frame) into the crop."""
    s = roi.resize_to
    return warp(grid, frame.inverted().then(roi.axis_map), s, s, order=order)


def build_fsm_input(image: np.ndarray, labels_crop: np.ndarray, roi: RoiCrop, dilation_px: int = 16,
                    masked: bool = True) -> FineInput:
    """Stack [masked RGB, OC, OD] in the crop frame.

    ``labels_crop`` is the coarse label grid already resampled into the crop.
    RGB is multiplied by the disc region dilated by ``dilation_px`` crop
    pixels; an empty disc region leaves RGB unmasked.
    """
    rgb = crop_image(image, roi)
    oc = (labels_crop == OC).astype(np.float32)
    od = (labels_crop >= OD).astype(np.float32)
    if masked and od.any():
        rgb = rgb * dilate(od > 0, dilation_px)[None].astype(np.float32)
    return FineInput(np.concatenate([rgb, oc[None], od[None]]).astype(np.float32), roi)


def build_flm_input(image: np.ndarray, heat_crop: np.ndarray, roi: RoiCrop) -> FineInput:
    rgb = crop_image(image, roi)
    return FineInput(np.concatenate([rgb, heat_crop[None]]).astype(np.float32), roi)


def paste_labels(labels_crop: np.ndarray, roi: RoiCrop, shape: tuple[int, int]) -> np.ndarray:
    """Map a crop-frame label grid back into the source frame (zeros outside the window)."""
    h, w = shape
    out = np.zeros((h, w), dtype=np.uint8)
    x0, y0 = roi.origin
    xa, ya = max(x0, 0), max(y0, 0)
    xb, yb = min(x0 + roi.side_px, w), min(y0 + roi.side_px, h)
    if xb <= xa or yb <= ya:
        return out
    sub = AxisMap(float(xa), float(ya)).inverted().then(roi.axis_map).inverted()
    out[ya:yb, xa:xb] = warp(labels_crop, sub, yb - ya, xb - xa, order=0)
    return out


@torch.no_grad()
def fsm_forward(net: FineSegNet, inp: FineInput) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities ``[3, s, s]`` and labels in the crop frame."""
    x = torch.from_numpy(inp.x)[None]
    probs = net(x)[0].numpy()
    return probs, label_from_probs(probs)


@torch.no_grad()
def flm_forward(net: FineLocNet, inp: FineInput) -> tuple[Point, np.ndarray]:
    x = torch.from_numpy(inp.x)[None]
    coords, heat = net(x)
    c = coords[0].numpy()
    return Point(float(c[0]), float(c[1])), heat[0].numpy()
