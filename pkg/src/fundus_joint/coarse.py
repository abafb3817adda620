"""Coarse stage: shared encoder with a heatmap decoder and a segmentation decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, Decoder, Encoder
from .geometry import FoveaPrior, Point, decode_channel, fallback_fovea

BACKGROUND, OD, OC = 0, 1, 2
SEG_CHANNELS = ("OC", "OD", "background")


class JointSegDetNet(nn.Module):
    """One encoder, two decoders branching right after it.

    Outputs ``(H_D, P_S)``: a ``[B, 2, h, w]`` heatmap pair (OD centre, fovea)
    and a ``[B, 3, h, w]`` probability map (OC, OD, background), both through
    per-channel sigmoids. A disabled branch returns ``None``.
    """

    def __init__(self, cfg: BackboneConfig, heat_branch: bool = True, seg_branch: bool = True):
        super().__init__()
        if not (heat_branch or seg_branch):
            raise ValueError("at least one decoder branch must be enabled")
        self.cfg = cfg
        self.encoder = Encoder(cfg, in_ch=3)
        self.heat_decoder = Decoder(cfg, out_ch=2) if heat_branch else None
        self.seg_decoder = Decoder(cfg, out_ch=3) if seg_branch else None

    @property
    def has_heat(self) -> bool:
        return self.heat_decoder is not None

    @property
    def has_seg(self) -> bool:
        return self.seg_decoder is not None

    def forward(self, img: torch.Tensor):
        feats = self.encoder(img)
        heat = torch.sigmoid(self.heat_decoder(feats)) if self.has_heat else None
        seg = torch.sigmoid(self.seg_decoder(feats)) if self.has_seg else None
        return heat, seg

    def freeze_encoder(self, frozen: bool = True) -> None:
        for p in self.encoder.parameters():
            p.requires_grad_(not frozen)


def label_from_probs(p_s: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Label grid from an (OC, OD, background) probability map.

    A pixel at or above threshold in the OC channel is OC whatever its OD
    probability; otherwise OD if the OD channel clears the threshold; else
    background.
    """
    p_s = np.asarray(p_s)
    if p_s.ndim != 3 or p_s.shape[0] != 3:
        raise ValueError(f"expected a [3, h, w] probability map, got {p_s.shape}")
    labels = np.full(p_s.shape[1:], BACKGROUND, dtype=np.uint8)
    labels[p_s[1] >= threshold] = OD
    labels[p_s[0] >= threshold] = OC
    return labels


def label_to_channels(labels: np.ndarray) -> np.ndarray:
    """Multi-label target ``[3, h, w]``: OC = cup, OD = disc including cup, background = rest."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, (BACKGROUND, OD, OC))
    if bad.any():
        raise ValueError(f"unknown label values {np.unique(labels[bad]).tolist()}")
    oc = labels == OC
    od = labels >= OD
    return np.stack([oc, od, ~od]).astype(np.float32)


def od_diameter(labels: np.ndarray) -> float:
    """Equivalent-circle diameter of the disc region; 0 when empty."""
    area = float(np.count_nonzero(np.asarray(labels) >= OD))
    return 2.0 * np.sqrt(area / np.pi)


def od_box_center(labels: np.ndarray) -> Optional[Point]:
    rows, cols = np.nonzero(np.asarray(labels) >= OD)
    if rows.size == 0:
        return None
    return Point((cols.min() + cols.max()) / 2.0, (rows.min() + rows.max()) / 2.0)


@dataclass
class CoarseOutput:
    heat: Optional[np.ndarray]  # [2, h, w]
    probs: Optional[np.ndarray]  # [3, h, w]
    labels: np.ndarray  # {0 bg, 1 OD, 2 OC}
    od_center: Optional[Point]
    fovea: Optional[Point]
    fovea_from_fallback: bool = False


def postprocess_coarse(
    heat: Optional[np.ndarray],
    probs: Optional[np.ndarray],
    tau_det: float = 0.3,
    prior: FoveaPrior = FoveaPrior(),
) -> CoarseOutput:
    if heat is None and probs is None:
        raise ValueError("nothing to post-process")
    size = (heat if heat is not None else probs).shape[1:]
    labels = label_from_probs(probs) if probs is not None else np.zeros(size, dtype=np.uint8)
    od_c = fov = None
    used_fallback = False
    if heat is not None:
        od_c = decode_channel(heat[0], tau_det)
        fov = decode_channel(heat[1], tau_det)
    if fov is None and od_c is not None:
        diam = od_diameter(labels)
        if diam <= 0:
            diam = size[0] / 8.0  # no segmentation available: typical disc size
        fov = fallback_fovea(od_c, diam, size, prior)
        used_fallback = fov is not None
    return CoarseOutput(heat, probs, labels, od_c, fov, used_fallback)
