"""Multi-view foot surface reconstruction from dense template-coordinate predictions."""

from .errors import FocusError, FormatError
from .geometry import CameraView, OrientedPointCloud, TriMesh, project, reprojection_error, triangulate_dlt
from .model import DeformableModel, ModelParams

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "DeformableModel",
    "FocusError",
    "FormatError",
    "ModelParams",
    "OrientedPointCloud",
    "TriMesh",
    "project",
    "reprojection_error",
    "triangulate_dlt",
    "__version__",
]
