"""Joint optic disc/cup segmentation and fovea localisation with a coarse-to-fine transformer pipeline."""

from .config import TrainConfig, desk_preset, table4_config
from .pipeline import Models, evaluate, infer_pipeline
from .train import crossval, lr_at, train_all, train_stage

__version__ = "0.1.0"

__all__ = [
    "Models",
    "TrainConfig",
    "crossval",
    "desk_preset",
    "evaluate",
    "infer_pipeline",
    "lr_at",
    "table4_config",
    "train_all",
    "train_stage",
]
