"""Multi-view Gaussian splat optimization with surface-aligned densification."""

from .core import (
    Camera,
    GaussianCloud,
    InvalidInputError,
    SceneConfig,
    build_covariance,
    init_cloud,
)

__all__ = [
    "Camera",
    "GaussianCloud",
    "InvalidInputError",
    "SceneConfig",
    "build_covariance",
    "init_cloud",
]

__version__ = "0.1.0"
