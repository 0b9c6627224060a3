"""Multi-view consistent diffusion for single-image face novel-view synthesis."""

from .cameras import (
    CameraPose,
    Intrinsics,
    VoxelGrid,
    pose_from_angles,
    project,
    scale_intrinsics,
)
from .diffusion import (
    MultiViewState,
    NoiseSchedule,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    haar_decode,
    haar_encode,
)
from .training import (
    TrainConfig,
    TrainResult,
    build_pipeline,
    desk_train_config,
    diffusion_loss,
    fit,
    sample_images,
    sample_views,
)

__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "Intrinsics",
    "MultiViewState",
    "NoiseSchedule",
    "TrainConfig",
    "TrainResult",
    "VoxelGrid",
    "build_pipeline",
    "ddim_step",
    "ddim_timesteps",
    "desk_train_config",
    "diffusion_loss",
    "fit",
    "forward_diffuse",
    "haar_decode",
    "haar_encode",
    "pose_from_angles",
    "project",
    "sample_images",
    "sample_views",
    "scale_intrinsics",
    "__version__",
]
