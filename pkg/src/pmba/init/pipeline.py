"""Global initialization pipeline feeding parallax bundle adjustment.

Stages: epipolar pairs, chordal rotation averaging, translation direction
refinement, rotation-only anchor selection, QPLC position bootstrap, convex
position refinement and (optionally) full parallax BA.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ..errors import DataError, DisconnectedGraphError, InfeasibleProblemError, StageError
from ..problem import BaProblem, Gauge, Observations, ParallaxFeatures, select_anchor_pairs
from ..solver import SolverConfig, SingularSystemError, optimize
from .positions import build_convex_problem, convex_pose_graph, qplc_bootstrap
from .rotation_averaging import (
    ViewGraph,
    chordal_rotation_averaging,
    estimate_eg_pairs,
    refine_translation_directions,
)
from .twoview import RansacConfig

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 0
    min_shared: int = 16
    ransac_iterations: int = 500
    ransac_threshold: float = 5e-3
    direction_iterations: int = 200
    direction_threshold: float = 5e-3
    robust_scale: float | None = None
    skip_qplc: bool = False
    convex_method: str = "lm"
    convex_max_iterations: int = 200
    method: str = "dl"
    max_iterations: int = 200

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Build from string key/value pairs (config files); unknown keys are errors."""
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown pipeline option {key!r}")
            kind = str(kinds[key])
            if not isinstance(raw, str):
                out[key] = raw
            elif "bool" in kind:
                out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif raw.strip().lower() in ("none", ""):
                out[key] = None
            elif "int" in kind:
                out[key] = int(raw)
            elif "float" in kind:
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        return cls(**out)


@dataclass
class StageReport:
    stage: str
    stats: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    wall_ms: float = 0.0


@dataclass
class AnchorSelection:
    main: np.ndarray
    assoc: np.ndarray
    theta: np.ndarray
    n: np.ndarray
    flagged: np.ndarray  # no EG-connected observing pair


@dataclass
class PipelineResult:
    problem: BaProblem  # initialized parallax problem (after BA if it ran)
    initial: BaProblem  # state handed to BA
    reports: list
    graph: ViewGraph
    rotations: np.ndarray
    anchors: AnchorSelection
    optimize_result: object = None


def select_anchors_and_init_features(obs: Observations, R, graph: ViewGraph,
                                     n_features: int) -> AnchorSelection:
    """Anchor pairs and parallax values from rotations alone.

    Each feature takes the EG-connected observing pair with the widest angle
    between globally rotated rays; that angle is its parallax angle and the
    measured ray in the main anchor is its direction.
    """
    main, assoc, angle, flagged = select_anchor_pairs(R, obs, n_features, graph.edge_set())
    if np.any(main < 0):
        bad = np.flatnonzero(main < 0).tolist()
        raise DataError(f"features observed by fewer than two poses: {bad[:10]}")
    lookup = {(int(i), int(j)): k for k, (i, j) in enumerate(zip(obs.pose, obs.feature))}
    rows = np.array([lookup[(int(m), j)] for j, m in enumerate(main)], np.int64)
    n = obs.ray[rows].copy()
    return AnchorSelection(main, assoc, angle, n, flagged)


def _gauge_from_graph(graph: ViewGraph, R, ref: int):
    """Reference pose plus the scale coordinate of its best-connected EG neighbour."""
    cand = [e for e in graph.edges if ref in (e.i, e.k)]
    if not cand:
        raise DataError(f"reference pose {ref} has no epipolar pair")
    e = max(cand, key=lambda e: (e.n_inliers, -max(e.i, e.k)))
    other = e.k if e.i == ref else e.i
    d = e.baseline_world(R[e.k])  # p_k - p_i
    if other == e.i:
        d = -d
    axis = int(np.argmax(np.abs(d)))
    return Gauge(ref, other, axis), float(d[axis])


def _baselines(graph: ViewGraph, R, main, assoc, active):
    by_edge = {(e.i, e.k): e for e in graph.edges}
    out = np.zeros((len(main), 3))
    for j in np.flatnonzero(active):
        e = by_edge[(int(main[j]), int(assoc[j]))]
        out[j] = e.baseline_world(R[e.k])
    return out


def _run(stage, reports, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except (DataError, InfeasibleProblemError, SingularSystemError, np.linalg.LinAlgError,
            ValueError) as exc:
        diag = {"error": type(exc).__name__}
        if isinstance(exc, DisconnectedGraphError):
            diag["components"] = exc.components
        raise StageError(stage, str(exc), diag) from exc
    reports.append(StageReport(stage, wall_ms=(time.perf_counter() - t0) * 1e3))
    return out


def run_pipeline(obs: Observations, n_poses: int, intrinsics, config: PipelineConfig | None = None,
                 run_ba: bool = True, artifacts_dir=None) -> PipelineResult:
    """Initialize a parallax BA problem from tracks alone.

    ``obs`` must carry measured rays.  On a stage failure a
    :class:`StageError` is raised; when ``artifacts_dir`` is given the
    reports and any rotations/positions computed so far are written there
    first.
    """
    config = config or PipelineConfig()
    rng = np.random.default_rng(config.seed)
    reports: list = []
    state: dict = {}
    n_features = int(obs.feature.max()) + 1 if len(obs) else 0
    try:
        return _pipeline(obs, n_poses, intrinsics, config, run_ba, rng, reports, state, n_features)
    except StageError:
        if artifacts_dir is not None:
            from ..scene.export import write_partial_artifacts

            write_partial_artifacts(artifacts_dir, reports, state)
        raise


def _pipeline(obs, n_poses, intrinsics, config, run_ba, rng, reports, state, n_features):
    ransac = RansacConfig(config.ransac_iterations, config.ransac_threshold)

    graph = _run("eg_pairs", reports, estimate_eg_pairs, obs, n_poses, rng, config.min_shared, ransac)
    reports[-1].stats.update(edges=len(graph.edges), skipped=len(graph.skipped),
                             mean_inliers=float(np.mean([e.n_inliers for e in graph.edges]))
                             if graph.edges else 0.0)
    reports[-1].flags += [f"pair {i}-{k} skipped: {why}" for i, k, why in graph.skipped]

    R = _run("rotation_averaging", reports, chordal_rotation_averaging, graph)
    state["R"] = R
    resid = [np.linalg.norm(R[e.k].T @ R[e.i] - e.R) for e in graph.edges]
    reports[-1].stats.update(max_chordal_residual=float(max(resid)) if resid else 0.0)

    graph = _run("direction_refinement", reports, refine_translation_directions, graph, obs, R, rng,
                 config.direction_iterations, config.direction_threshold)
    reports[-1].stats.update(edges=len(graph.edges))
    _run("connectivity", reports, graph.require_connected)

    anchors = _run("anchors", reports, select_anchors_and_init_features, obs, R, graph, n_features)
    active = ~anchors.flagged
    reports[-1].stats.update(features=n_features, flagged=int(anchors.flagged.sum()),
                             min_theta=float(anchors.theta.min()) if n_features else 0.0)
    reports[-1].flags += [f"feature {j} has no epipolar anchor pair" for j in
                          np.flatnonzero(anchors.flagged)]

    ref = 0
    gauge, scale_value = _run("gauge", reports, _gauge_from_graph, graph, R, ref)
    baseline = _baselines(graph, R, anchors.main, anchors.assoc, active)
    convex = build_convex_problem(R, obs, anchors.theta, anchors.n, anchors.main, anchors.assoc,
                                  baseline, gauge, scale_value, active)

    if config.skip_qplc:
        start = convex.random_start(rng)
        reports.append(StageReport("qplc", {"skipped": True}))
    else:
        q = _run("qplc", reports, qplc_bootstrap, convex)
        start = q.p
        reports[-1].stats.update(objective=q.objective, regularized=q.regularized,
                                 active_constraints=q.active_constraints,
                                 unconstrained_feasible=q.unconstrained_feasible,
                                 min_cheirality=q.min_cheirality)
        if q.regularized:
            reports[-1].flags.append("quadratic form regularized")
    state["p"] = start

    cfg = SolverConfig(method=config.convex_method, max_iterations=config.convex_max_iterations,
                       diagnostics=False)
    res = _run("convex_pose_graph", reports, convex_pose_graph, convex, start, cfg, config.robust_scale)
    p = res.problem.p
    state["p"] = p
    reports[-1].stats.update(reason=res.reason, iterations=res.iterations,
                             objective=convex.objective(p), zero_norm=res.problem.zero_norm_count())

    feats = ParallaxFeatures(anchors.theta.copy(), anchors.n.copy(), anchors.main, anchors.assoc)
    from ..camera import IntrinsicsTable

    table = intrinsics if isinstance(intrinsics, IntrinsicsTable) else IntrinsicsTable.shared(intrinsics, n_poses)
    initial = BaProblem(R.copy(), p.copy(), table, obs, feats,
                        Gauge(gauge.fixed_pose, gauge.scale_pose, gauge.scale_axis),
                        robust_scale=None)
    result = PipelineResult(initial, initial, reports, graph, R, anchors)
    if run_ba:
        ba = _run("bundle_adjustment", reports, optimize, initial,
                  SolverConfig(method=config.method, max_iterations=config.max_iterations))
        reports[-1].stats.update(reason=ba.reason, iterations=ba.iterations,
                                 chi2_ray=ba.problem.chi2_ray(), chi2_uv=ba.problem.chi2_uv())
        result.problem = ba.problem
        result.optimize_result = ba
    return result
