"""Retrieval-based camera relocalization with a layerwise-distilled encoder."""

from .pose_core import Pose, RelativePose, angular_distance, compose_absolute, relative_pose

__version__ = "0.1.0"

__all__ = ["Pose", "RelativePose", "angular_distance", "compose_absolute", "relative_pose"]
