"""Global initialization: epipolar pairs, rotation averaging, anchors, positions."""

from .pipeline import PipelineConfig, PipelineResult, StageReport, run_pipeline, select_anchors_and_init_features
from .positions import ConvexPositionProblem, PositionModel, baseline_rotation, convex_pose_graph, qplc_bootstrap
from .rotation_averaging import (
    ViewGraph,
    chordal_rotation_averaging,
    estimate_eg_pairs,
    refine_translation_directions,
)
from .twoview import EgPair, RansacConfig, estimate_relative_pose, refine_direction

__all__ = [
    "ConvexPositionProblem",
    "EgPair",
    "PipelineConfig",
    "PipelineResult",
    "PositionModel",
    "RansacConfig",
    "StageReport",
    "ViewGraph",
    "baseline_rotation",
    "chordal_rotation_averaging",
    "convex_pose_graph",
    "estimate_eg_pairs",
    "estimate_relative_pose",
    "qplc_bootstrap",
    "refine_direction",
    "refine_translation_directions",
    "run_pipeline",
    "select_anchors_and_init_features",
]
