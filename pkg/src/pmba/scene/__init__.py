from .align import AlignmentResult, align_similarity
from .bal import BalDataset, bal_to_problem, parse_bal, problem_to_bal, scene_to_bal, serialize_bal
from .export import export_geometry, export_iterations
from .synthetic import SceneSpec, SyntheticScene, generate_scene

__all__ = [
    "AlignmentResult",
    "BalDataset",
    "SceneSpec",
    "SyntheticScene",
    "align_similarity",
    "bal_to_problem",
    "export_geometry",
    "export_iterations",
    "generate_scene",
    "parse_bal",
    "problem_to_bal",
    "scene_to_bal",
    "serialize_bal",
]
