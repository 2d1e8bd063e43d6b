"""Feature parameterizations, error functions and their analytic Jacobians.

Two layers live here.  The array layer (``parallax_*``, ``xyz_*``, ``idp_*``)
works on batches: every argument carries a leading observation axis and the
solver calls these directly.  The object layer (:class:`ParallaxFeature`,
:func:`ray_error`, ...) wraps single instances for scripting and tests.

Pose Jacobian columns are ordered (rotation, position) to match
:func:`pmba.geometry.retract_pose`; parallax feature columns are
``(dtheta, dn_1, dn_2)`` to match :func:`retract_feature`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import CameraIntrinsics, IntrinsicsTable
from .errors import (
    AtPlaneError,
    CoincidentAnchorsError,
    CoincidentPointError,
    DegenerateParallaxError,
    ZeroRayError,
)
from .geometry import CameraPose, retract_ray, skew, tangent_basis

THETA_MIN = 1e-10
THETA_MAX = np.pi - 1e-10
ZERO_RAY = 1e-14


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


# ---------------------------------------------------------------------------
# parallax parameterization, array layer


def _anchor_terms(theta, n, Rm, pm, pa):
    w = _mv(Rm, n)
    a = pm - pa
    g = np.cross(a, w)
    s = np.linalg.norm(g, axis=-1)
    c = _dot(a, w)
    # k = ||pm - pa|| sin(alpha - theta), written without arccos
    k = np.cos(theta) * s - np.sin(theta) * c
    return w, a, g, s, c, k


def parallax_depth(theta, n, Rm, pm, pa):
    theta = np.asarray(theta, dtype=float)
    _, a, _, _, _, k = _anchor_terms(theta, n, Rm, pm, pa)
    if np.any(np.abs(np.sin(theta)) <= 1e-12):
        raise DegenerateParallaxError("sin(theta) <= 1e-12: depth undefined")
    if np.any(np.linalg.norm(a, axis=-1) == 0.0):
        raise CoincidentAnchorsError("main and associate anchors share a position")
    return k / np.sin(theta)


def parallax_to_point(theta, n, Rm, pm, pa):
    d = parallax_depth(theta, n, Rm, pm, pa)
    return d[..., None] * _mv(Rm, n) + pm


def point_to_parallax(f, Rm, pm, pa):
    """``(theta, n)`` of world points ``f`` for the given anchors."""
    um = np.asarray(f, dtype=float) - pm
    ua = np.asarray(f, dtype=float) - pa
    nm = np.linalg.norm(um, axis=-1)
    na = np.linalg.norm(ua, axis=-1)
    if np.any(nm == 0.0) or np.any(na == 0.0):
        raise CoincidentPointError("point coincides with an anchor centre")
    theta = np.arctan2(np.linalg.norm(np.cross(um, ua), axis=-1), _dot(um, ua))
    n = _mv(np.swapaxes(Rm, -1, -2), um / nm[..., None])
    return theta, n


def parallax_scaled_ray(theta, n, Rm, pm, pa, pi):
    """``sin(theta) * (f - p_i)``, evaluated without dividing by ``sin(theta)``."""
    w, _, _, _, _, k = _anchor_terms(theta, n, Rm, pm, pa)
    return k[..., None] * w + np.sin(theta)[..., None] * (pm - pi)


def parallax_ray_error(theta, n, Rm, pm, pa, Ri, pi, measured):
    N = parallax_scaled_ray(theta, n, Rm, pm, pa, pi)
    norm = np.linalg.norm(N, axis=-1)
    if np.any(norm <= ZERO_RAY):
        raise ZeroRayError("predicted ray has zero length (camera at the feature)")
    return N / norm[..., None] - _mv(Ri, measured)


def parallax_linearize(theta, n, Rm, pm, pa, Ri, pi, measured):
    """Residuals and Jacobian blocks of the ray-direction error.

    Returns ``(e, J_F, J_m, J_a, J_i)`` with shapes ``(K,3)``, ``(K,3,3)`` and
    three ``(K,3,6)`` pose blocks.  Each pose block is the partial derivative
    with respect to that argument alone; when the observer is also an anchor
    the caller sums the blocks belonging to the same pose.
    """
    theta = np.asarray(theta, dtype=float)
    w, a, g, s, c, k = _anchor_terms(theta, n, Rm, pm, pa)
    st, ct = np.sin(theta), np.cos(theta)
    N = k[..., None] * w + st[..., None] * (pm - pi)
    nn = np.linalg.norm(N, axis=-1)
    if np.any(nn <= ZERO_RAY):
        raise ZeroRayError("predicted ray has zero length (camera at the feature)")
    Nh = N / nn[..., None]
    e = Nh - _mv(Ri, measured)
    P = (np.eye(3) - Nh[..., :, None] * Nh[..., None, :]) / nn[..., None, None]

    s_safe = np.where(s > 0.0, s, 1.0)[..., None]
    ds_dw = np.where(s[..., None] > 0.0, np.cross(g, a) / s_safe, 0.0)
    ds_da = np.where(s[..., None] > 0.0, np.cross(w, g) / s_safe, 0.0)
    dk_dw = ct[..., None] * ds_dw - st[..., None] * a
    dk_da = ct[..., None] * ds_da - st[..., None] * w

    dN_dw = k[..., None, None] * np.eye(3) + w[..., :, None] * dk_dw[..., None, :]
    dN_da = w[..., :, None] * dk_da[..., None, :]
    dN_dtheta = (-st * s - ct * c)[..., None] * w + ct[..., None] * (pm - pi)

    Rm_nx = Rm @ skew(n)
    A = tangent_basis(n)
    dN_dn = -dN_dw @ Rm_nx @ A

    shape = theta.shape
    JF = np.empty(shape + (3, 3))
    JF[..., :, 0] = _mv(P, dN_dtheta)
    JF[..., :, 1:] = P @ dN_dn

    eye = np.eye(3)
    Jm = np.empty(shape + (3, 6))
    Jm[..., :, :3] = -(P @ dN_dw @ Rm_nx)
    Jm[..., :, 3:] = P @ (dN_da + st[..., None, None] * eye)
    Ja = np.zeros(shape + (3, 6))
    Ja[..., :, 3:] = -(P @ dN_da)
    Ji = np.empty(shape + (3, 6))
    Ji[..., :, :3] = Ri @ skew(measured)
    Ji[..., :, 3:] = -st[..., None, None] * P
    return e, JF, Jm, Ja, Ji


def clamp_theta(theta):
    """Clamp into ``[THETA_MIN, THETA_MAX]``; returns ``(theta, n_clamped)``."""
    theta = np.asarray(theta, dtype=float)
    clamped = np.clip(theta, THETA_MIN, THETA_MAX)
    return clamped, int(np.count_nonzero(clamped != theta))


# ---------------------------------------------------------------------------
# pixel reprojection (XYZ and inverse depth)


def reprojection_residual(local, uv, intr: IntrinsicsTable, cam_idx=None):
    return intr.project(local, cam_idx) - uv


def xyz_linearize(f, Ri, pi, uv, intr: IntrinsicsTable, cam_idx):
    """Pixel residuals and Jacobians for Euclidean points.

    Returns ``(e, J_f, J_i)``: ``(K,2)``, ``(K,2,3)``, ``(K,2,6)``.
    """
    Rt = np.swapaxes(Ri, -1, -2)
    h = _mv(Rt, f - pi)
    pix, D = intr.project(h, cam_idx, with_jacobian=True)
    Jf = D @ Rt
    Ji = np.empty(h.shape[:-1] + (2, 6))
    Ji[..., :, :3] = D @ skew(h)
    Ji[..., :, 3:] = -Jf
    return pix - uv, Jf, Ji


def idp_local(ray, rho, Ranc, panc, Ri, pi):
    """``rho * R_i^T (f - p_i)``: finite as ``rho -> 0``."""
    Rt = np.swapaxes(Ri, -1, -2)
    return _mv(Rt, _mv(Ranc, ray) + rho[..., None] * (panc - pi))


def idp_linearize(ray, rho, Ranc, panc, Ri, pi, uv, intr: IntrinsicsTable, cam_idx):
    """Returns ``(e, J_rho, J_anchor, J_i)``: ``(K,2)``, ``(K,2,1)``, ``(K,2,6)``, ``(K,2,6)``."""
    Rt = np.swapaxes(Ri, -1, -2)
    h = idp_local(ray, rho, Ranc, panc, Ri, pi)
    pix, D = intr.project(h, cam_idx, with_jacobian=True)
    Jrho = (D @ _mv(Rt, panc - pi)[..., None])
    Janc = np.empty(h.shape[:-1] + (2, 6))
    Janc[..., :, :3] = -(D @ Rt @ Ranc @ skew(ray))
    Janc[..., :, 3:] = rho[..., None, None] * (D @ Rt)
    Ji = np.empty(h.shape[:-1] + (2, 6))
    Ji[..., :, :3] = D @ skew(h)
    Ji[..., :, 3:] = -rho[..., None, None] * (D @ Rt)
    return pix - uv, Jrho, Janc, Ji


def ray_error_from_point(f, Ri, pi, measured):
    """Ray-direction error evaluated at a Euclidean point."""
    d = np.asarray(f, dtype=float) - pi
    return d / np.linalg.norm(d, axis=-1, keepdims=True) - _mv(Ri, measured)


# ---------------------------------------------------------------------------
# object layer


@dataclass(frozen=True)
class ParallaxFeature:
    """Parallax angle, unit ray in the main-anchor frame, and the two anchors."""

    theta: float
    n: np.ndarray
    main_anchor: int
    assoc_anchor: int

    def __post_init__(self):
        if self.main_anchor == self.assoc_anchor:
            raise ValueError("main and associate anchors must differ")

    @property
    def cos_sin_n(self):
        return np.cos(self.theta), np.sin(self.theta), np.asarray(self.n)


@dataclass(frozen=True)
class EuclideanFeature:
    f: np.ndarray


@dataclass(frozen=True)
class InverseDepthFeature:
    anchor: int
    ray: np.ndarray
    rho: float


def measured_ray(uv, intr: CameraIntrinsics):
    """Normalized ``K^{-1} u`` (with radial undistortion when present)."""
    return IntrinsicsTable.shared(intr, 1).unproject(np.asarray(uv, dtype=float)[None])[0]


def feature_depth(F: ParallaxFeature, Tm: CameraPose, Ta: CameraPose) -> float:
    return float(parallax_depth(np.float64(F.theta), np.asarray(F.n, float), Tm.R, Tm.p, Ta.p))


def feature_to_point(F: ParallaxFeature, Tm: CameraPose, Ta: CameraPose) -> np.ndarray:
    return parallax_to_point(np.float64(F.theta), np.asarray(F.n, float), Tm.R, Tm.p, Ta.p)


def point_to_feature(f, Tm: CameraPose, Ta: CameraPose, main_anchor: int = 0,
                     assoc_anchor: int = 1) -> ParallaxFeature:
    theta, n = point_to_parallax(np.asarray(f, float), Tm.R, Tm.p, Ta.p)
    return ParallaxFeature(float(theta), n, main_anchor, assoc_anchor)


def scaled_ray(F: ParallaxFeature, Tm: CameraPose, Ta: CameraPose, p_i) -> np.ndarray:
    return parallax_scaled_ray(np.float64(F.theta), np.asarray(F.n, float), Tm.R, Tm.p, Ta.p,
                               np.asarray(p_i, float))


def ray_error(F: ParallaxFeature, Tm: CameraPose, Ta: CameraPose, Ti: CameraPose,
              measured) -> np.ndarray:
    return parallax_ray_error(np.float64(F.theta), np.asarray(F.n, float), Tm.R, Tm.p, Ta.p,
                              Ti.R, Ti.p, np.asarray(measured, float))


def ray_error_jacobians(F: ParallaxFeature, Tm: CameraPose, Ta: CameraPose, Ti: CameraPose,
                        measured) -> dict:
    _, JF, Jm, Ja, Ji = parallax_linearize(
        np.float64(F.theta), np.asarray(F.n, float), Tm.R, Tm.p, Ta.p, Ti.R, Ti.p,
        np.asarray(measured, float))
    return {"feature": JF, "main": Jm, "assoc": Ja, "observer": Ji}


def reprojection_error(f, Ti: CameraPose, uv, K: CameraIntrinsics, return_behind: bool = False):
    """``K o pi(R^T (f - p)) - u``.  Points behind the camera still give a
    finite residual (the sign flip of the perspective division)."""
    local = Ti.to_local(f)
    if local[2] == 0.0:
        raise AtPlaneError("point on the camera plane (local z == 0)")
    e = IntrinsicsTable.shared(K, 1).project(local[None])[0] - np.asarray(uv, float)
    if return_behind:
        return e, bool(local[2] < 0.0)
    return e


def retract_feature(F: ParallaxFeature, dF) -> tuple[ParallaxFeature, bool]:
    """Apply ``(dtheta, dn)``; returns the new feature and whether theta was clamped."""
    dF = np.asarray(dF, dtype=float)
    theta, nclamp = clamp_theta(F.theta + dF[0])
    n = retract_ray(np.asarray(F.n, float), dF[1:])
    return replace(F, theta=float(theta), n=n), bool(nclamp)
