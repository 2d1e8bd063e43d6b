"""Parallax-angle bundle adjustment on manifold with convex global initialization."""

from .camera import CameraIntrinsics
from .geometry import CameraPose, exp_so3, log_so3, retract_pose, retract_ray, skew, tangent_basis
from .problem import BaProblem, Gauge, Observations
from .solver import SolverConfig, optimize

__version__ = "0.1.0"

__all__ = [
    "BaProblem",
    "CameraIntrinsics",
    "CameraPose",
    "Gauge",
    "Observations",
    "SolverConfig",
    "exp_so3",
    "log_so3",
    "optimize",
    "retract_pose",
    "retract_ray",
    "skew",
    "tangent_basis",
]
