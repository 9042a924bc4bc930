"""Joint camera-pose and radiance-field estimation from unposed images.

Training is adversarial first (a GAN over image patches bootstraps coarse
poses and scene structure via a pose-regressing inversion network), then
photometric, interleaved as A -> AB...AB -> B.
"""

from .config import TrainConfig, ScheduleConfig, toy_config
from .datasets import SceneDataset, TrainingViews, load_dataset, make_toy_scene
from .field import FieldConfig, RadianceField
from .geometry import CameraPose, Intrinsics, PosePrior
from .training import TrainState, run_schedule

__all__ = [
    "TrainConfig",
    "ScheduleConfig",
    "toy_config",
    "SceneDataset",
    "TrainingViews",
    "load_dataset",
    "make_toy_scene",
    "FieldConfig",
    "RadianceField",
    "CameraPose",
    "Intrinsics",
    "PosePrior",
    "TrainState",
    "run_schedule",
]
