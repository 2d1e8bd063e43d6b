"""Similarity alignment of an estimate onto ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass
class AlignmentResult:
    scale: float
    R: np.ndarray
    t: np.ndarray
    pose_rmse: float
    point_rmse: float
    rotation_error: float = float("nan")  # max geodesic error of aligned rotations, radians

    def apply(self, X):
        return self.scale * (np.asarray(X, float) @ self.R.T) + self.t


def _similarity(src, dst):
    """``(s, R, t)`` with ``dst ~ s R src + t``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    if np.linalg.matrix_rank(a, tol=1e-10 * max(np.abs(a).max(), 1e-300)) < 2:
        raise DataError("alignment needs at least three non-collinear correspondences")
    s = np.sqrt(np.sum(b * b) / np.sum(a * a))
    U, _, Vt = np.linalg.svd(b.T @ a)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return s, R, mu_d - s * R @ mu_s


def _rmse(a, b):
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1)))) if len(a) else 0.0


def align_similarity(estimate, ground_truth, est_points=None, gt_points=None,
                     est_R=None, gt_R=None) -> AlignmentResult:
    """Align estimated positions (and optionally points) onto ground truth.

    The transform is fitted on all supplied correspondences jointly (scale
    from the ratio of centred norms, rotation from the SVD of the
    cross-covariance).  RMSEs are reported separately for positions and
    points; rotations, when given, are compared after alignment.
    """
    P = np.asarray(estimate, float).reshape(-1, 3)
    G = np.asarray(ground_truth, float).reshape(-1, 3)
    if P.shape != G.shape:
        raise DataError("estimate and ground truth differ in shape")
    src, dst = P, G
    if est_points is not None:
        src = np.vstack([P, np.asarray(est_points, float).reshape(-1, 3)])
        dst = np.vstack([G, np.asarray(gt_points, float).reshape(-1, 3)])
    if len(src) < 3:
        raise DataError("alignment needs at least three correspondences")
    s, R, t = _similarity(src, dst)
    res = AlignmentResult(s, R, t, _rmse(s * P @ R.T + t, G), 0.0)
    if est_points is not None:
        X = np.asarray(est_points, float).reshape(-1, 3)
        res.point_rmse = _rmse(s * X @ R.T + t, np.asarray(gt_points, float).reshape(-1, 3))
    if est_R is not None:
        from ..geometry import rotation_angle

        res.rotation_error = float(np.max(rotation_angle(R @ np.asarray(est_R), np.asarray(gt_R))))
    return res
