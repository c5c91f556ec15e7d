"""Static point-cloud map priors for camera-based 3D perception."""

from .geometry import CameraModel, PointCloud, Pose, compose, invert, project_point, transform_points

__all__ = ["CameraModel", "PointCloud", "Pose", "compose", "invert", "project_point", "transform_points"]
__version__ = "0.1.0"
