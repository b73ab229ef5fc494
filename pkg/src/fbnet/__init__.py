"""Joint few-shot recognition and novel-view synthesis with bidirectional
feedback between a conditional 3D-aware generator and a prototypical
classifier."""

from .core import (Checkpoint, CheckpointError, Config, ConfigError, DataError,
                   FBNetError, NumericError, load_checkpoint, load_config,
                   save_checkpoint, seeded_rng)
from .geom3d import ViewPose, pose_to_rotation, rotate_grid, sample_pose

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "Config", "ConfigError", "DataError",
    "FBNetError", "NumericError", "ViewPose", "load_checkpoint", "load_config",
    "pose_to_rotation", "rotate_grid", "sample_pose", "save_checkpoint",
    "seeded_rng", "__version__",
]
