"""Run configuration: one flat record of every knob, with a key=value text form."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from typing import Any

from .backbone import BackboneConfig
from .geometry import FoveaPrior
from .losses import LossWeights, StarShapeConfig

STAGES = ("coarse", "fsm", "flm")


@dataclass
class TrainConfig:
    stage: str = "coarse"
    seed: int = 0
    # optimisation
    L0: float = 0.05
    epochs: int = 300
    batch_size: int = 12
    max_iterations: int = 0  # 0: epochs * ceil(n / batch_size)
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0  # max global gradient norm; 0 disables
    # loss weights
    lambda0: float = 1.0
    lambda1: float = 1.0
    mu: float = 0.5
    nu: float = 0.5
    star_angles: int = 36
    star_gain: float = 10.0
    star_min_mass: float = 64.0
    # ablation switches
    vessel_pretrain: bool = False
    heat_branch: bool = True
    seg_branch: bool = True
    star_loss: bool = True
    freeze_encoder: bool = False
    vessel_ckpt: str = ""
    # backbone
    input_size: int = 224
    embed_dim: int = 96
    window_size: int = 7
    depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (3, 6, 12, 24)
    head_prior: float = 0.05  # initial foreground probability of every output map
    # targets and decoding
    sigma_divisor: float = 20.0
    tau_det: float = 0.3
    fovea_temporal: float = 2.5
    fovea_inferior: float = 0.3
    # fine stage (crop sides are in original-image pixels)
    teacher_forcing: bool = True
    od_crop: int = 448
    fovea_crop: int = 128
    crop_jitter: float = 0.1  # teacher-forcing crop offset, fraction of the side
    fsm_dilation: int = 16  # crop-frame pixels
    fsm_masked: bool = True
    d_flm: float = 30.0  # crop-frame pixels
    # data
    augment: bool = False
    preprocess: bool = True  # field-of-view crop before resizing

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(d) for d in self.num_heads)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.max_iterations < 0:
            raise ValueError("batch_size must be >= 1 and epochs, max_iterations >= 0")
        if not self.L0 > 0:
            raise ValueError("L0 must be positive")
        if not (self.heat_branch or self.seg_branch):
            raise ValueError("at least one of heat_branch, seg_branch must be on")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            embed_dim=self.embed_dim,
            depths=self.depths,
            num_heads=self.num_heads,
            window_size=self.window_size,
            input_size=(self.input_size, self.input_size),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda0, self.lambda1, self.mu, self.nu)

    def star_config(self) -> StarShapeConfig:
        return StarShapeConfig(n_angles=self.star_angles, boundary_softness=self.star_gain,
                               min_mass=self.star_min_mass)

    def fovea_prior(self) -> FoveaPrior:
        return FoveaPrior(self.fovea_temporal, self.fovea_inferior)

    def sigma(self, size: int) -> float:
        return size / self.sigma_divisor

    def iterations_for(self, n: int) -> int:
        if self.max_iterations:
            return self.max_iterations
        return self.epochs * math.ceil(n / self.batch_size)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).updated(parse_kv(text))

    def updated(self, values: dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _coerce(getattr(self, key), raw)
        return self.replace(**kw)


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def desk_preset(**overrides) -> TrainConfig:
    """CPU-sized setting: 64x64 model input, C=24, window 4, crops and distances scaled by 64/224.

    Short overfit schedules need a larger initial rate than full training.
    """
    k = 64 / 224
    kw = dict(
        input_size=64, embed_dim=24, window_size=4, L0=0.2,
        od_crop=32, fovea_crop=32, fsm_dilation=max(1, round(16 * k)), d_flm=30.0 * k,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


# Coarse-stage variants of the ablation table: vessel prior, heatmap branch,
# segmentation branch, star-shape loss.
TABLE4_ROWS = {
    "I": dict(vessel_pretrain=False, heat_branch=False, seg_branch=True, star_loss=False),
    "II": dict(vessel_pretrain=False, heat_branch=True, seg_branch=False, star_loss=False),
    "III": dict(vessel_pretrain=False, heat_branch=True, seg_branch=True, star_loss=False),
    "IV": dict(vessel_pretrain=True, heat_branch=False, seg_branch=True, star_loss=False),
    "V": dict(vessel_pretrain=True, heat_branch=True, seg_branch=False, star_loss=False),
    "star-off": dict(vessel_pretrain=True, heat_branch=True, seg_branch=True, star_loss=False),
    "full": dict(vessel_pretrain=True, heat_branch=True, seg_branch=True, star_loss=True),
}


def table4_config(row: str, base: TrainConfig | None = None) -> TrainConfig:
    if row not in TABLE4_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; choose from {list(TABLE4_ROWS)}")
    return (base or TrainConfig()).replace(**TABLE4_ROWS[row])
