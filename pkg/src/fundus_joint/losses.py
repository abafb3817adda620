"""Training objectives: soft Dice, heatmap detection loss, star-shape prior, composites."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 1.0  # detection term
    lambda1: float = 1.0  # segmentation term
    mu: float = 0.5  # Dice inside the segmentation term
    nu: float = 0.5  # star-shape inside the segmentation term

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "mu", "nu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class StarShapeConfig:
    n_angles: int = 36
    boundary_softness: float = 10.0  # logit gain applied to probabilities before ray integration
    eps: float = 1e-6
    ray_step: float = 0.5
    interp_sharpness: float = 10.0  # Gaussian tap sharpness of the ray sampler
    min_mass: float = 16.0  # region mass (pixels) at which a class gets half weight

    def __post_init__(self):
        if self.n_angles < 8:
            raise ValueError("n_angles must be at least 8")
        if not self.boundary_softness > 0:
            raise ValueError("boundary_softness must be positive")
        if not self.ray_step > 0:
            raise ValueError("ray_step must be positive")
        if self.min_mass < 0:
            raise ValueError("min_mass must be non-negative")
        if not self.interp_sharpness > 0:
            raise ValueError("interp_sharpness must be positive")


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6,
              valid: torch.Tensor | None = None) -> torch.Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` per 2-D map, averaged over leading dims.

    ``valid`` (boolean, shaped like the leading dims) restricts the average to
    maps that have ground truth, e.g. the cup channel of a disc-only dataset.
    """
    _check_same(pred, target, "soft_dice")
    target = target.to(pred.dtype)
    inter = (pred * target).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    per = 1.0 - (2.0 * inter + eps) / (denom + eps)
    if valid is None:
        return per.mean()
    valid = valid.to(per.dtype).expand_as(per)
    return (per * valid).sum() / valid.sum().clamp_min(1.0)


def detection_loss(target: torch.Tensor, pred: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """MSE between heatmaps plus soft Dice of the prediction against the thresholded target."""
    _check_same(target, pred, "detection_loss")
    target = target.to(pred.dtype)
    region = (target >= threshold).to(pred.dtype)
    return F.mse_loss(pred, target) + soft_dice(pred, region)


def _reach(sharp: float) -> int:
    # lattice points further than this carry weight below exp(-40)
    return int(math.ceil(math.sqrt(40.0 / sharp)))


def _kernel_1d(pos: torch.Tensor, sharp: float):
    """Integer taps and smooth weights of positions ``pos`` on the integer lattice.

    Gaussian bumps normalised over the whole lattice, so a constant field
    interpolates to itself and off-grid taps (zero padding) read as zero.
    """
    reach = _reach(sharp)
    base = torch.floor(pos)
    frac = pos - base
    ks = torch.arange(-reach + 1, reach + 1, dtype=pos.dtype, device=pos.device)
    w = torch.exp(-sharp * (frac.unsqueeze(-1) - ks) ** 2)
    return base.long().unsqueeze(-1) + ks.long(), w / w.sum(-1, keepdim=True)


def _interp(prob: torch.Tensor, px: torch.Tensor, py: torch.Tensor, sharp: float) -> torch.Tensor:
    """Smoothly interpolate maps ``(N, h, w)`` at positions ``(N, S)``; outside reads zero."""
    n, h, w = prob.shape
    pad = 2 * _reach(sharp) + 1
    padded = F.pad(prob, (pad, pad, pad, pad))
    hp, wp = h + 2 * pad, w + 2 * pad
    iy, wy = _kernel_1d(py, sharp)
    ix, wx = _kernel_1d(px, sharp)
    iy = (iy + pad).clamp(0, hp - 1)
    ix = (ix + pad).clamp(0, wp - 1)
    flat = (iy.unsqueeze(-1) * wp + ix.unsqueeze(-2)).reshape(n, -1)
    taps = torch.gather(padded.reshape(n, -1), 1, flat).view(*iy.shape, ix.shape[-1])
    return torch.einsum("nsa,nsb,nsab->ns", wy, wx, taps)


def soft_region(prob: torch.Tensor, gain: float) -> torch.Tensor:
    """Sharpen probabilities as ``sigmoid(gain * logit(p))``.

    Written as ``p^k / (p^k + (1-p)^k)``: 0 and 1 are fixed points, so crisp
    masks pass through unchanged, while faint background probability is
    squashed towards zero and cannot dominate centroid and ray integrals.
    """
    prob = prob.clamp(0.0, 1.0)
    a = prob**gain
    return a / (a + (1.0 - prob) ** gain)


def radial_profile(prob: torch.Tensor, cfg: StarShapeConfig = StarShapeConfig()):
    """Soft centroid, radii per angle and mass for maps ``(N, h, w)``.

    The radius along a ray is the integral of the (sigmoid-sharpened)
    probability along it, which for a crisp star-shaped region equals the
    centroid-to-boundary distance.
    """
    prob = soft_region(prob, cfg.boundary_softness)
    n, h, w = prob.shape
    dtype = prob.dtype
    mass = prob.sum(dim=(-2, -1))
    safe = mass.clamp_min(cfg.eps)
    ys = torch.arange(h, dtype=dtype, device=prob.device)
    xs = torch.arange(w, dtype=dtype, device=prob.device)
    cy = (prob.sum(-1) * ys).sum(-1) / safe
    cx = (prob.sum(-2) * xs).sum(-1) / safe

    theta = torch.arange(cfg.n_angles, dtype=dtype, device=prob.device) * (2 * math.pi / cfg.n_angles)
    r_max = math.hypot(h, w)
    steps = int(math.ceil(r_max / cfg.ray_step))
    r = (torch.arange(steps, dtype=dtype, device=prob.device) + 0.5) * cfg.ray_step
    dx = (torch.cos(theta)[:, None] * r[None, :]).reshape(-1)
    dy = (torch.sin(theta)[:, None] * r[None, :]).reshape(-1)
    px = cx[:, None] + dx[None, :]  # (N, S)
    py = cy[:, None] + dy[None, :]
    vals = _interp(prob, px, py, cfg.interp_sharpness)
    radii = vals.view(n, cfg.n_angles, steps).sum(-1) * cfg.ray_step
    return torch.stack([cx, cy], dim=-1), radii, mass


def star_shape_loss(pred: torch.Tensor, cfg: StarShapeConfig = StarShapeConfig()) -> torch.Tensor:
    """Normalised variance of centroid-to-boundary radii over angles.

    ``pred`` is ``(h, w)``, ``(C, h, w)`` or ``(B, C, h, w)``; classes are
    summed and the batch averaged. Each class is weighted by
    ``mass / (mass + min_mass)`` of its sharpened region, so barely-present
    regions (whose radii are noise) cannot produce large gradients; classes
    with mass below ``eps`` contribute zero.
    """
    if pred.dim() == 2:
        pred = pred[None, None]
    elif pred.dim() == 3:
        pred = pred[None]
    b, c, h, w = pred.shape
    _, radii, mass = radial_profile(pred.reshape(b * c, h, w), cfg)
    mean = radii.mean(-1)
    var = ((radii - mean[:, None]) ** 2).mean(-1)
    per = var / (mean**2 + cfg.eps)
    if cfg.min_mass > 0:
        per = per * mass / (mass + cfg.min_mass)
    per = torch.where(mass >= cfg.eps, per, torch.zeros_like(per))
    return per.view(b, c).sum(-1).mean()


def seg_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    weights: LossWeights = LossWeights(),
    cfg: StarShapeConfig = StarShapeConfig(),
    star: bool = True,
    parts: dict | None = None,
    valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """``mu * soft_dice(pred, target) + nu * star(pred[OC, OD])``.

    ``target`` is the multi-label ``(OC, OD, background)`` channel stack of
    the same shape as ``pred``. ``parts`` (if given) receives the two terms;
    ``valid`` is passed on to :func:`soft_dice`.
    """
    _check_same(pred, target, "seg_loss")
    dice = soft_dice(pred, target, valid=valid)
    total = weights.mu * dice
    star_term = pred.new_zeros(())
    if star and weights.nu > 0:
        star_term = star_shape_loss(pred[..., :2, :, :], cfg)
        total = total + weights.nu * star_term
    if parts is not None:
        parts["dice"] = dice
        parts["star"] = star_term
    return total


def jsdm_loss(det, seg, weights: LossWeights = LossWeights()):
    """Weighted sum of detection and segmentation losses; a missing branch passes ``None``."""
    total = 0.0
    if det is not None:
        total = total + weights.lambda0 * det
    if seg is not None:
        total = total + weights.lambda1 * seg
    return total


def flm_loss(c_pred: torch.Tensor, c_gt: torch.Tensor, heat_pred: torch.Tensor,
             heat_gt: torch.Tensor, crop_size: float, parts: dict | None = None) -> torch.Tensor:
    """Coordinate MSE (coordinates divided by the crop size) plus heatmap MSE."""
    _check_same(c_pred, c_gt, "flm_loss coordinates")
    _check_same(heat_pred, heat_gt, "flm_loss heatmaps")
    coord = F.mse_loss(c_pred / crop_size, c_gt.to(c_pred.dtype) / crop_size)
    heat = F.mse_loss(heat_pred, heat_gt.to(heat_pred.dtype))
    if parts is not None:
        parts["coord"] = coord
        parts["heat"] = heat
    return coord + heat
