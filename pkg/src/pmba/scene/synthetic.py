"""Synthetic scenes with deliberately problematic features.

The default spec mirrors a small simulation: four poses moving forward along
the optical axis, ten features of which one is far away and one sits almost
on the line of camera centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..camera import CameraIntrinsics, IntrinsicsTable
from ..geometry import exp_so3
from ..problem import BaProblem, Gauge, Observations, features_from_points

LAYOUTS = ("forward", "lateral", "arc")
FAR_RATIO = 100.0
COLLINEAR_ANGLE = 1e-3


@dataclass
class SceneSpec:
    n_poses: int = 4
    n_features: int = 10
    n_far: int | None = None
    n_collinear: int | None = None
    noise_px: float = 0.0
    seed: int = 0
    layout: str = "forward"
    focal: float = 500.0
    width: int = 640
    height: int = 480
    far_factor: float = 1000.0
    collinear_offset: float = 1e-3

    def resolved_counts(self):
        default = 1 if self.n_features >= 3 and self.layout == "forward" else 0
        n_far = default if self.n_far is None else self.n_far
        if self.n_far is None and self.layout != "forward" and self.n_features >= 3:
            n_far = 0
        n_col = default if self.n_collinear is None else self.n_collinear
        return n_far, n_col


@dataclass
class SyntheticScene:
    R: np.ndarray
    p: np.ndarray
    points: np.ndarray
    intrinsics: CameraIntrinsics
    tags: list
    obs: Observations
    spec: SceneSpec = field(repr=False, default=None)

    @property
    def n_poses(self):
        return len(self.p)

    @property
    def n_features(self):
        return len(self.points)

    def intrinsics_table(self) -> IntrinsicsTable:
        return IntrinsicsTable.shared(self.intrinsics, self.n_poses)

    def problem(self, mode: str = "pmba", R=None, p=None, points=None, anchors=None) -> BaProblem:
        """BA problem seeded at ground truth, or at the given state."""
        R = self.R if R is None else R
        p = self.p if p is None else p
        X = self.points if points is None else points
        base = BaProblem(R.copy(), p.copy(), self.intrinsics_table(), self.obs, None,
                         Gauge.default(self.p), tags=np.array(self.tags))
        base.features = features_from_points(base, X, mode, anchors)
        return base

    def perturbed_state(self, rot_sigma=0.01, pos_sigma=0.05, point_rel_sigma=0.02, seed=1):
        """Poses and points with Gaussian noise; gauge-fixed quantities untouched."""
        rng = np.random.default_rng(seed)
        gauge = Gauge.default(self.p)
        M = self.n_poses
        dR = exp_so3(rng.normal(scale=rot_sigma, size=(M, 3)))
        R = self.R @ dR
        p = self.p + rng.normal(scale=pos_sigma, size=(M, 3))
        R[gauge.fixed_pose] = self.R[gauge.fixed_pose]
        p[gauge.fixed_pose] = self.p[gauge.fixed_pose]
        if gauge.scale_pose is not None:
            p[gauge.scale_pose, gauge.scale_axis] = self.p[gauge.scale_pose, gauge.scale_axis]
        centre = self.p.mean(axis=0)
        dist = np.linalg.norm(self.points - centre, axis=1, keepdims=True)
        X = self.points + rng.normal(scale=point_rel_sigma, size=self.points.shape) * dist
        return R, p, X


def _look_at(centre, target, up=np.array([0.0, -1.0, 0.0])):
    """Camera-to-world rotation with +z towards ``target`` (image y down)."""
    z = target - centre
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _poses(spec: SceneSpec, rng):
    M = spec.n_poses
    if spec.layout == "forward":
        p = np.zeros((M, 3))
        p[:, 2] = np.arange(M, dtype=float)
        R = exp_so3(rng.normal(scale=0.02, size=(M, 3)))
        R[0] = np.eye(3)
        lo = np.array([-4.0, -3.0, p[-1, 2] + 5.0])
        hi = np.array([4.0, 3.0, p[-1, 2] + 14.0])
    elif spec.layout == "lateral":
        p = np.zeros((M, 3))
        p[:, 0] = np.arange(M, dtype=float) - (M - 1) / 2.0
        p[:, 1] = rng.normal(scale=0.1, size=M)
        R = exp_so3(rng.normal(scale=0.03, size=(M, 3)))
        lo = np.array([p[0, 0] - 3.0, -3.0, 6.0])
        hi = np.array([p[-1, 0] + 3.0, 3.0, 14.0])
    elif spec.layout == "arc":
        target = np.array([0.0, 0.0, 10.0])
        ang = np.linspace(-0.6, 0.6, M)
        p = np.stack([10.0 * np.sin(ang), rng.normal(scale=0.5, size=M), 10.0 - 10.0 * np.cos(ang)], axis=1)
        R = np.stack([_look_at(c, target + rng.normal(scale=0.3, size=3)) for c in p])
        lo, hi = target - 3.0, target + 3.0
    else:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    return R, p, lo, hi


def _visible(R, p, X, intr: CameraIntrinsics, width, height):
    local = np.einsum("mji,nmj->nmi", R, X[:, None, :] - p[None, :, :])
    z = local[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * local[..., 0] / z + intr.cx
        v = intr.fy * local[..., 1] / z + intr.cy
    return (z > 0.1) & (u >= 0) & (u < width) & (v >= 0) & (v < height)


def generate_scene(spec: SceneSpec | None = None) -> SyntheticScene:
    """Deterministic synthetic scene for a seed.

    Raises ``ValueError`` for infeasible specs (fewer than two poses, more
    pathological features than features, features that cannot be seen twice).
    """
    spec = spec or SceneSpec()
    if spec.n_poses < 2:
        raise ValueError("a scene needs at least two poses")
    if spec.n_features < 1:
        raise ValueError("a scene needs at least one feature")
    n_far, n_col = spec.resolved_counts()
    if n_far < 0 or n_col < 0 or n_far + n_col > spec.n_features:
        raise ValueError("pathological feature counts exceed the feature count")
    if n_col and spec.layout != "forward":
        raise ValueError("collinear features need the 'forward' layout")

    rng = np.random.default_rng(spec.seed)
    intr = CameraIntrinsics(spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0)
    R, p, lo, hi = _poses(spec, rng)
    centroid = p.mean(axis=0)
    baseline = max(np.max(np.linalg.norm(p[:, None] - p[None], axis=-1)), 1e-12)

    pts, tags = [], []
    n_normal = spec.n_features - n_far - n_col
    for _ in range(n_normal):
        for _attempt in range(1000):
            X = rng.uniform(lo, hi)
            if _visible(R, p, X[None], intr, spec.width, spec.height)[0].sum() >= 2:
                break
        else:
            raise ValueError("could not place a feature visible from two poses")
        pts.append(X)
        tags.append("normal")
    view_dir = R[:, :, 2].mean(axis=0)
    view_dir /= np.linalg.norm(view_dir)
    for _ in range(n_far):
        for _attempt in range(1000):
            d = view_dir + rng.normal(scale=0.15, size=3)
            d /= np.linalg.norm(d)
            X = centroid + spec.far_factor * baseline * d
            if _visible(R, p, X[None], intr, spec.width, spec.height)[0].sum() >= 2:
                break
        else:
            raise ValueError("could not place a far feature visible from two poses")
        pts.append(X)
        tags.append("far")
    for k in range(n_col):
        # ahead of the last camera, a hair off the line of centres
        off = spec.collinear_offset * rng.normal(size=2)
        X = np.array([off[0], off[1], p[-1, 2] + 10.0 + 2.0 * k])
        pts.append(X)
        tags.append("collinear")
    X = np.array(pts).reshape(-1, 3)

    vis = _visible(R, p, X, intr, spec.width, spec.height)
    if np.any(vis.sum(axis=1) < 2):
        raise ValueError("infeasible spec: a feature is visible from fewer than two poses")
    _check_tags(p, X, tags, vis)

    feat_idx, pose_idx = np.nonzero(vis)
    order = np.lexsort((feat_idx, pose_idx))
    pose_idx, feat_idx = pose_idx[order], feat_idx[order]
    local = np.einsum("kji,kj->ki", R[pose_idx], X[feat_idx] - p[pose_idx])
    table = IntrinsicsTable.shared(intr, spec.n_poses)
    uv = table.project(local, pose_idx)
    if spec.noise_px > 0:
        uv = uv + rng.normal(scale=spec.noise_px, size=uv.shape)
    obs = Observations.from_pixels(pose_idx, feat_idx, uv, table)
    return SyntheticScene(R, p, X, intr, tags, obs, spec)


def _check_tags(p, X, tags, vis):
    centroid = p.mean(axis=0)
    baseline = np.max(np.linalg.norm(p[:, None] - p[None], axis=-1))
    for j, tag in enumerate(tags):
        if tag == "far":
            assert np.linalg.norm(X[j] - centroid) >= FAR_RATIO * baseline
        elif tag == "collinear":
            rays = X[j] - p[vis[j]]
            rays /= np.linalg.norm(rays, axis=1, keepdims=True)
            cosines = np.clip(rays @ rays.T, -1.0, 1.0)
            assert np.arccos(cosines.min()) < COLLINEAR_ANGLE


def max_subtended_angle(p, X, observers) -> float:
    rays = X - p[observers]
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    # arctan2 form keeps precision for tiny angles
    best = 0.0
    for i in range(len(rays)):
        c = np.cross(rays[i], rays)
        ang = np.arctan2(np.linalg.norm(c, axis=1), rays @ rays[i])
        best = max(best, float(ang.max()))
    return best
