"""Bundle-adjustment problem state for the three feature parameterizations.

A :class:`BaProblem` is immutable in spirit: :meth:`BaProblem.retract`
returns a new problem.  Observations, features and poses are stored as
struct-of-arrays so residuals and Jacobians evaluate in one vectorized pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import features as ft
from ._util import unordered_group_pairs
from .camera import IntrinsicsTable
from .errors import DataError
from .geometry import retract_poses, retract_ray


@dataclass
class Observations:
    pose: np.ndarray
    feature: np.ndarray
    uv: np.ndarray
    ray: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.int64)
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        self.ray = np.asarray(self.ray, dtype=float).reshape(-1, 3)
        if self.weight is None:
            self.weight = np.ones(len(self.pose))

    @classmethod
    def from_pixels(cls, pose, feature, uv, intrinsics: IntrinsicsTable, weight=None):
        """Measured rays are computed once here and cached."""
        pose = np.asarray(pose, dtype=np.int64)
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        ray = intrinsics.unproject(uv, pose) if len(pose) else np.zeros((0, 3))
        return cls(pose, feature, uv, ray, weight)

    def __len__(self):
        return len(self.pose)

    def subset(self, mask) -> "Observations":
        return Observations(self.pose[mask], self.feature[mask], self.uv[mask], self.ray[mask],
                            self.weight[mask])


@dataclass
class ParallaxFeatures:
    theta: np.ndarray
    n: np.ndarray
    main: np.ndarray
    assoc: np.ndarray

    dim = 3
    mode = "pmba"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.n = np.asarray(self.n, dtype=float).reshape(-1, 3)
        self.main = np.asarray(self.main, dtype=np.int64)
        self.assoc = np.asarray(self.assoc, dtype=np.int64)

    def __len__(self):
        return len(self.theta)

    def __getitem__(self, j) -> ft.ParallaxFeature:
        return ft.ParallaxFeature(float(self.theta[j]), self.n[j].copy(), int(self.main[j]),
                                  int(self.assoc[j]))

    def points(self, R, p):
        theta, _ = ft.clamp_theta(self.theta)
        return ft.parallax_to_point(theta, self.n, R[self.main], p[self.main], p[self.assoc])

    def retract(self, dF):
        theta, nclamp = ft.clamp_theta(self.theta + dF[:, 0])
        n = retract_ray(self.n, dF[:, 1:]) if len(self.n) else self.n
        return ParallaxFeatures(theta, n, self.main, self.assoc), nclamp


@dataclass
class PointFeatures:
    xyz: np.ndarray

    dim = 3
    mode = "xyz"

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.xyz)

    def points(self, R, p):
        return self.xyz.copy()

    def retract(self, dF):
        return PointFeatures(self.xyz + dF), 0


@dataclass
class InverseDepthFeatures:
    anchor: np.ndarray
    ray: np.ndarray
    rho: np.ndarray

    dim = 1
    mode = "idp"

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.int64)
        self.ray = np.asarray(self.ray, dtype=float).reshape(-1, 3)
        self.rho = np.asarray(self.rho, dtype=float)

    def __len__(self):
        return len(self.rho)

    def points(self, R, p):
        w = (R[self.anchor] @ self.ray[:, :, None])[:, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return p[self.anchor] + w / self.rho[:, None]

    def retract(self, dF):
        return InverseDepthFeatures(self.anchor, self.ray, self.rho + dF[:, 0]), 0


@dataclass(frozen=True)
class Gauge:
    """Pose ``fixed_pose`` is frozen; one position coordinate of ``scale_pose`` fixes scale."""

    fixed_pose: int | None = 0
    scale_pose: int | None = 1
    scale_axis: int | None = None

    @classmethod
    def default(cls, p, fixed_pose: int = 0, scale_pose: int = 1) -> "Gauge":
        if len(p) < 2:
            return cls(fixed_pose if len(p) else None, None, None)
        axis = int(np.argmax(np.abs(p[scale_pose] - p[fixed_pose])))
        return cls(fixed_pose, scale_pose, axis)

    def mask(self, n_poses: int, dim: int = 6) -> np.ndarray:
        """Boolean ``(n_poses, dim)`` array, True where a parameter is held fixed."""
        fixed = np.zeros((n_poses, dim), dtype=bool)
        if self.fixed_pose is not None and n_poses:
            fixed[self.fixed_pose] = True
        if self.scale_pose is not None and self.scale_axis is not None:
            fixed[self.scale_pose, dim - 3 + self.scale_axis] = True
        return fixed


@dataclass
class Linearization:
    """Per-observation residuals and Jacobian blocks.

    ``pose_idx`` is ``(O, S)`` with ``-1`` marking unused slots; ``pose_jac`` is
    ``(O, S, r, dp)``; ``feat_jac`` is ``(O, r, df)``.  Gauge-fixed columns are
    already zeroed.
    """

    residual: np.ndarray
    pose_idx: np.ndarray
    pose_jac: np.ndarray
    feat_idx: np.ndarray
    feat_jac: np.ndarray
    n_poses: int
    n_features: int

    @property
    def pose_dim(self):
        return self.pose_jac.shape[-1]

    @property
    def feat_dim(self):
        return self.feat_jac.shape[-1]

    def jvp(self, dT, dF):
        """``J @ [dT; dF]`` reshaped to ``(O, r)``."""
        out = np.zeros_like(self.residual)
        for s in range(self.pose_idx.shape[1]):
            idx = self.pose_idx[:, s]
            ok = idx >= 0
            out[ok] += (self.pose_jac[ok, s] @ dT[idx[ok]][:, :, None])[:, :, 0]
        if self.feat_dim:
            out += (self.feat_jac @ dF[self.feat_idx][:, :, None])[:, :, 0]
        return out

    def dense_jacobian(self):
        """Explicit dense ``J`` (observation-by-observation loop; test oracle)."""
        O, r = self.residual.shape
        dp, df = self.pose_dim, self.feat_dim
        ncol = self.n_poses * dp + self.n_features * df
        J = np.zeros((O * r, ncol))
        for o in range(O):
            rows = slice(o * r, (o + 1) * r)
            for s in range(self.pose_idx.shape[1]):
                i = self.pose_idx[o, s]
                if i >= 0:
                    J[rows, i * dp:(i + 1) * dp] += self.pose_jac[o, s]
            if df:
                j = self.feat_idx[o]
                off = self.n_poses * dp + j * df
                J[rows, off:off + df] += self.feat_jac[o]
        return J


def pseudo_huber(s, scale):
    """``rho(s)`` and ``rho'(s)`` for squared norms ``s``."""
    b2 = scale * scale
    root = np.sqrt(1.0 + s / b2)
    return 2.0 * b2 * (root - 1.0), 1.0 / root


@dataclass
class BaProblem:
    R: np.ndarray
    p: np.ndarray
    intrinsics: IntrinsicsTable
    obs: Observations
    features: ParallaxFeatures | PointFeatures | InverseDepthFeatures
    gauge: Gauge = field(default_factory=Gauge)
    robust_scale: float | None = None
    clamp_count: int = 0
    tags: np.ndarray | None = None

    pose_dim = 6

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)

    # -- bookkeeping -------------------------------------------------------

    @property
    def mode(self) -> str:
        return self.features.mode

    @property
    def feat_dim(self) -> int:
        return self.features.dim

    @property
    def n_poses(self) -> int:
        return len(self.p)

    @property
    def n_features(self) -> int:
        return len(self.features)

    def fixed_mask(self) -> np.ndarray:
        return self.gauge.mask(self.n_poses, 6)

    def validate(self) -> None:
        M, N = self.n_poses, self.n_features
        o = self.obs
        bad = np.flatnonzero((o.pose < 0) | (o.pose >= M) | (o.feature < 0) | (o.feature >= N))
        if len(bad):
            raise DataError(f"observation {int(bad[0])} references an invalid pose/feature id")
        if self.mode == "pmba" and N:
            f = self.features
            seen = set(zip(o.pose.tolist(), o.feature.tolist()))
            for j in range(N):
                for anc in (int(f.main[j]), int(f.assoc[j])):
                    if (anc, j) not in seen:
                        raise DataError(f"feature {j}: anchor pose {anc} does not observe it")
        if self.mode == "idp" and N:
            seen = set(zip(o.pose.tolist(), o.feature.tolist()))
            for j in range(N):
                if (int(self.features.anchor[j]), j) not in seen:
                    raise DataError(f"feature {j}: IDP anchor does not observe it")

    def points(self) -> np.ndarray:
        return self.features.points(self.R, self.p)

    # -- residuals ---------------------------------------------------------

    def raw_residuals(self) -> np.ndarray:
        """Unweighted residuals of the active error model."""
        o, f = self.obs, self.features
        if self.mode == "pmba":
            theta, _ = ft.clamp_theta(f.theta[o.feature])
            m, a = f.main[o.feature], f.assoc[o.feature]
            return ft.parallax_ray_error(theta, f.n[o.feature], self.R[m], self.p[m], self.p[a],
                                         self.R[o.pose], self.p[o.pose], o.ray)
        if self.mode == "xyz":
            local = np.einsum("kji,kj->ki", self.R[o.pose], f.xyz[o.feature] - self.p[o.pose])
            return self.intrinsics.project(local, o.pose) - o.uv
        anc = f.anchor[o.feature]
        local = ft.idp_local(f.ray[o.feature], f.rho[o.feature], self.R[anc], self.p[anc],
                             self.R[o.pose], self.p[o.pose])
        return self.intrinsics.project(local, o.pose) - o.uv

    def _robust_weights(self, r):
        s = np.sum(r * r, axis=1)
        w = self.obs.weight
        if self.robust_scale is None:
            return w * s, w
        rho, drho = pseudo_huber(s, self.robust_scale)
        return w * rho, w * drho

    def cost(self) -> float:
        """Half the (robustified, weighted) sum of squares."""
        if not len(self.obs):
            return 0.0
        rho, _ = self._robust_weights(self.raw_residuals())
        return 0.5 * float(np.sum(rho))

    def chi2(self) -> float:
        """Weighted sum of squared residuals of the active error model."""
        r = self.raw_residuals()
        return float(np.sum(self.obs.weight * np.sum(r * r, axis=1)))

    def chi2_uv(self) -> float:
        """Pixel reprojection chi2 evaluated at the current world points."""
        if not len(self.obs):
            return 0.0
        o = self.obs
        X = self.points()
        local = np.einsum("kji,kj->ki", self.R[o.pose], X[o.feature] - self.p[o.pose])
        if not np.all(np.isfinite(local)) or np.any(local[:, 2] == 0.0):
            return float("inf")
        r = self.intrinsics.project(local, o.pose) - o.uv
        return float(np.sum(o.weight * np.sum(r * r, axis=1)))

    def chi2_ray(self) -> float:
        """Ray-direction chi2; for baselines evaluated at the current world points."""
        if not len(self.obs):
            return 0.0
        if self.mode == "pmba":
            return self.chi2()
        o = self.obs
        X = self.points()
        e = ft.ray_error_from_point(X[o.feature], self.R[o.pose], self.p[o.pose], o.ray)
        return float(np.sum(o.weight * np.sum(e * e, axis=1)))

    # -- linearization -----------------------------------------------------

    def linearize(self) -> Linearization:
        o, f = self.obs, self.features
        R, p = self.R, self.p
        O = len(o)
        if self.mode == "pmba":
            theta, _ = ft.clamp_theta(f.theta[o.feature])
            m, a = f.main[o.feature], f.assoc[o.feature]
            e, JF, Jm, Ja, Ji = ft.parallax_linearize(theta, f.n[o.feature], R[m], p[m], p[a],
                                                      R[o.pose], p[o.pose], o.ray)
            pose_idx = np.stack([m, a, o.pose], axis=1)
            pose_jac = np.stack([Jm, Ja, Ji], axis=1)
        elif self.mode == "xyz":
            e, JF, Ji = ft.xyz_linearize(f.xyz[o.feature], R[o.pose], p[o.pose], o.uv,
                                         self.intrinsics, o.pose)
            pose_idx = o.pose[:, None]
            pose_jac = Ji[:, None]
        else:
            anc = f.anchor[o.feature]
            e, JF, Janc, Ji = ft.idp_linearize(f.ray[o.feature], f.rho[o.feature], R[anc], p[anc],
                                               R[o.pose], p[o.pose], o.uv, self.intrinsics, o.pose)
            pose_idx = np.stack([anc, o.pose], axis=1)
            pose_jac = np.stack([Janc, Ji], axis=1)
        if O == 0:
            r = 3 if self.mode == "pmba" else 2
            e = np.zeros((0, r))
            JF = np.zeros((0, r, self.feat_dim))
            pose_idx = np.zeros((0, pose_idx.shape[1] if pose_idx.ndim == 2 else 1), np.int64)
            pose_jac = np.zeros((0, pose_idx.shape[1], r, 6))

        _, wts = self._robust_weights(e)
        sw = np.sqrt(wts)
        e = e * sw[:, None]
        JF = JF * sw[:, None, None]
        pose_jac = pose_jac * sw[:, None, None, None]
        fixed = self.fixed_mask()
        if fixed.any():
            pose_jac = pose_jac * (~fixed[pose_idx])[:, :, None, :]
        return Linearization(e, pose_idx, pose_jac, o.feature, JF, self.n_poses, self.n_features)

    def retract(self, dT, dF) -> "BaProblem":
        dT = np.asarray(dT, dtype=float).reshape(self.n_poses, 6)
        dF = np.asarray(dF, dtype=float).reshape(self.n_features, self.feat_dim)
        dT = np.where(self.fixed_mask(), 0.0, dT)
        R, p = retract_poses(self.R, self.p, dT) if self.n_poses else (self.R, self.p)
        feats, nclamp = self.features.retract(dF)
        return replace(self, R=R, p=p, features=feats, clamp_count=self.clamp_count + nclamp)

    def metrics(self) -> dict:
        return {"chi2_ray": self.chi2_ray(), "chi2_uv": self.chi2_uv()}

    # -- conversions -------------------------------------------------------

    def with_points(self, X, mode: str, anchors=None) -> "BaProblem":
        """Same poses and observations with features rebuilt from world points."""
        return replace(self, features=features_from_points(self, X, mode, anchors), clamp_count=0)

    def as_mode(self, mode: str) -> "BaProblem":
        if mode == self.mode:
            return self
        return self.with_points(self.points(), mode)


def select_anchor_pairs(R, obs: Observations, n_features: int, allowed=None):
    """Pick, per feature, the observing pose pair with the widest ray angle.

    The angle is measured between globally rotated measured rays, so no
    positions are needed.  ``allowed`` (a set of ``(i, k)`` with ``i < k``)
    restricts candidates; features without an allowed pair fall back to the
    best pair overall and are flagged.  Ties go to the lower pose-id pair; the
    lower id becomes the main anchor.

    Returns ``(main, assoc, angle, flagged)``.
    """
    order = np.lexsort((obs.pose, obs.feature))
    fj = obs.feature[order]
    pj = obs.pose[order]
    gray = (R[pj] @ obs.ray[order][:, :, None])[:, :, 0]
    a, b = unordered_group_pairs(fj)
    keep = pj[a] != pj[b]
    a, b = a[keep], b[keep]
    ang = np.arctan2(np.linalg.norm(np.cross(gray[a], gray[b]), axis=1),
                     np.sum(gray[a] * gray[b], axis=1))
    pa, pb = pj[a], pj[b]
    lo, hi = np.minimum(pa, pb), np.maximum(pa, pb)
    feat = fj[a]
    if allowed is not None:
        ok = np.fromiter(((int(x), int(y)) in allowed for x, y in zip(lo, hi)), bool, len(lo))
    else:
        ok = np.ones(len(lo), bool)

    main = np.full(n_features, -1, np.int64)
    assoc = np.full(n_features, -1, np.int64)
    angle = np.zeros(n_features)
    flagged = np.zeros(n_features, bool)
    # best pair: allowed first, then widest angle, then lowest ids
    sel = np.lexsort((hi, lo, -ang, ~ok, feat))
    first = np.r_[True, feat[sel][1:] != feat[sel][:-1]] if len(sel) else np.zeros(0, bool)
    best = sel[first]
    main[feat[best]] = lo[best]
    assoc[feat[best]] = hi[best]
    angle[feat[best]] = ang[best]
    flagged[feat[best]] = ~ok[best]
    return main, assoc, angle, flagged


def features_from_points(problem: BaProblem, X, mode: str, anchors=None):
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    R, p, o = problem.R, problem.p, problem.obs
    N = len(X)
    if mode == "xyz":
        return PointFeatures(X.copy())
    if mode == "pmba":
        if anchors is None:
            main, assoc, _, _ = select_anchor_pairs(R, o, N)
        else:
            main, assoc = (np.asarray(v, np.int64) for v in anchors)
        if np.any(main < 0):
            raise DataError("every feature needs at least two observing poses")
        theta, n = ft.point_to_parallax(X, R[main], p[main], p[assoc])
        return ParallaxFeatures(theta, n, main, assoc)
    if mode == "idp":
        order = np.lexsort((o.pose, o.feature))
        first = np.r_[True, o.feature[order][1:] != o.feature[order][:-1]]
        rows = order[first]
        anchor = np.full(N, -1, np.int64)
        ray = np.zeros((N, 3))
        anchor[o.feature[rows]] = o.pose[rows]
        ray[o.feature[rows]] = o.ray[rows]
        local = np.einsum("kji,kj->ki", R[anchor], X - p[anchor])
        depth = np.sum(local * ray, axis=1)
        return InverseDepthFeatures(anchor, ray, 1.0 / depth)
    raise ValueError(f"unknown parameterization {mode!r}")
