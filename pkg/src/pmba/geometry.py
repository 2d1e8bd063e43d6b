"""Rotation-group and unit-ray primitives.

All functions broadcast over leading batch dimensions: a ``(..., 3)`` array of
rotation vectors maps to a ``(..., 3, 3)`` array of rotation matrices and so
on.  Poses follow the camera-to-world convention: a world point ``X`` has
local coordinates ``R.T @ (X - p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8


def skew(x):
    """Matrix ``S(x)`` with ``S(x) @ y == cross(x, y)``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 1] = -x[..., 2]
    out[..., 0, 2] = x[..., 1]
    out[..., 1, 0] = x[..., 2]
    out[..., 1, 2] = -x[..., 0]
    out[..., 2, 0] = -x[..., 1]
    out[..., 2, 1] = x[..., 0]
    return out


def vee(m):
    """Inverse of :func:`skew` applied to the antisymmetric part of ``m``."""
    m = np.asarray(m, dtype=float)
    return 0.5 * np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )


def exp_so3(w):
    """Rodrigues' formula, with a second-order series below ``SMALL_ANGLE``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def log_so3(R, return_flag: bool = False):
    """Rotation vector of ``R`` with norm in ``[0, pi]``.

    Rotations within 1e-6 rad of a half turn take the axis from ``R + R^T``;
    with ``return_flag=True`` a boolean array marks those entries.
    """
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    v = vee(R)  # sin(theta) * axis
    sin_t = np.linalg.norm(v, axis=-1)
    theta = np.arctan2(sin_t, cos_t)

    small = theta < SMALL_ANGLE
    near_pi = (np.pi - theta) < 1e-6
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(small | near_pi, 1.0, np.sin(theta)))
    w = scale[..., None] * v

    if np.any(near_pi):
        B = 0.5 * (R + np.swapaxes(R, -1, -2)) - cos_t[..., None, None] * np.eye(3)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        col = np.argmax(diag, axis=-1)
        axis = np.take_along_axis(B, col[..., None, None], axis=-1)[..., 0]
        axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
        # sign from the (tiny) antisymmetric part when it carries information
        dot = np.sum(axis * v, axis=-1)
        axis = np.where((dot < 0)[..., None], -axis, axis)
        w = np.where(near_pi[..., None], theta[..., None] * axis, w)

    if return_flag:
        return w, near_pi
    return w


def normalize(v, axis: int = -1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def tangent_basis(n):
    """3x2 basis ``A`` with ``[A n]`` special orthogonal.

    The helper axis is the canonical axis least aligned with ``n``; ties go to
    the lowest index, so the result is a deterministic function of ``n``.
    """
    n = np.asarray(n, dtype=float)
    k = np.argmin(np.abs(n), axis=-1)
    e = np.zeros(n.shape)
    np.put_along_axis(e, k[..., None], 1.0, axis=-1)
    a1 = normalize(np.cross(e, n))
    a2 = np.cross(n, a1)
    return np.stack([a1, a2], axis=-1)


def retract_ray(n, dn):
    """Rotate ``n`` by ``Exp(A_n dn)``; ``dn`` lives in the 2-d tangent plane."""
    n = np.asarray(n, dtype=float)
    A = tangent_basis(n)
    phi = (A @ np.asarray(dn, dtype=float)[..., None])[..., 0]
    out = (exp_so3(phi) @ n[..., None])[..., 0]
    # remove the last-ulp drift so repeated retractions stay on the sphere
    return normalize(out)


def project_to_so3(M):
    """Closest rotation in Frobenius norm (SVD with determinant correction)."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(U.shape[:-2] + (3,))
    D[..., 2] = d
    return (U * D[..., None, :]) @ Vt


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    eye = np.broadcast_to(np.eye(3), R.shape)
    ortho = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - eye, axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(ortho < tol) and np.all(np.abs(det - 1.0) < tol))


def rotation_angle(Ra, Rb):
    """Geodesic angle between rotations (radians)."""
    return np.linalg.norm(log_so3(np.swapaxes(Ra, -1, -2) @ Rb), axis=-1)


@dataclass(frozen=True)
class CameraPose:
    """Camera orientation ``R`` (camera-to-world) and centre ``p``."""

    R: np.ndarray
    p: np.ndarray

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def to_local(self, x):
        return (np.asarray(x, dtype=float) - self.p) @ self.R


def retract_pose(T: CameraPose, d) -> CameraPose:
    """Right-multiplicative rotation increment ``d[:3]``, additive position ``d[3:]``."""
    d = np.asarray(d, dtype=float)
    return CameraPose(T.R @ exp_so3(d[:3]), T.p + d[3:])


def retract_poses(R, p, d):
    """Batched :func:`retract_pose` over ``(M, 3, 3)``, ``(M, 3)``, ``(M, 6)`` arrays."""
    return R @ exp_so3(d[:, :3]), p + d[:, 3:]
