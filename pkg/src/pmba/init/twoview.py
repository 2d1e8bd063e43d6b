"""Two-view epipolar geometry from unit bearing vectors.

Relative pose convention for a pair ``(i, k)``: a point with local ray
coordinates ``x_i`` in camera ``i`` and ``x_k`` in camera ``k`` satisfies
``d_k x_k = R_ik d_i x_i + t_ik`` with ``R_ik = R_k^T R_i`` and
``t_ik`` proportional to ``R_k^T (p_i - p_k)``.  The essential matrix is
``E = [t_ik]_x R_ik`` so that ``x_k^T E x_i = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..geometry import normalize, project_to_so3, skew

logger = logging.getLogger(__name__)

MIN_POINTS = 8


@dataclass
class EgPair:
    i: int
    k: int
    R: np.ndarray  # R_ik, camera i coordinates -> camera k coordinates
    t: np.ndarray  # unit t_ik in camera k coordinates
    n_inliers: int
    inliers: np.ndarray = field(repr=False, default=None)  # feature ids

    def baseline_world(self, Rk) -> np.ndarray:
        """Unit world direction of ``p_k - p_i`` given camera ``k``'s rotation."""
        return -(Rk @ self.t)


@dataclass
class RansacConfig:
    iterations: int = 500
    threshold: float = 5e-3  # epipolar angular error, radians
    min_inliers: int = 8
    degeneracy_ratio: float = 1e-9


def essential_8pt(xi, xk):
    """Least-squares essential matrix from ``n >= 8`` ray pairs.

    Returns ``(E, null_ratio)`` where ``null_ratio`` is the second-smallest
    over the largest singular value of the design matrix; a tiny value means
    the solution is not unique (pure rotation, planar-critical data).
    """
    A = (xk[:, :, None] * xi[:, None, :]).reshape(len(xi), 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    E = Vt[-1].reshape(3, 3)
    U, _, Wt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Wt
    s = np.r_[s, np.zeros(9 - len(s))]
    ratio = s[7] / s[0] if s[0] > 0 else 0.0
    return E, ratio


def epipolar_error(E, xi, xk):
    """Sampson-style angular error of each correspondence."""
    Ex = xi @ E.T
    Etx = xk @ E
    num = np.sum(xk * Ex, axis=1)
    den = np.sum(Ex * Ex, axis=1) + np.sum(Etx * Etx, axis=1)
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def triangulate_depths(R, t, xi, xk):
    """Depths ``(d_i, d_k)`` minimizing ``||d_i R x_i + t - d_k x_k||``."""
    a = xi @ R.T
    b = -xk
    aa = np.sum(a * a, axis=1)
    bb = np.sum(b * b, axis=1)
    ab = np.sum(a * b, axis=1)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    with np.errstate(divide="ignore", invalid="ignore"):
        di = (-bb * at + ab * bt) / det
        dk = (ab * at - aa * bt) / det
    return di, dk


def decompose_essential(E, xi, xk):
    """Pick ``(R, t)`` among the four decompositions by cheirality count."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best, best_count = None, -1
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            di, dk = triangulate_depths(R, t, xi, xk)
            count = int(np.count_nonzero((di > 0) & (dk > 0)))
            if count > best_count:
                best, best_count = (R, t), count
    return best[0], best[1], best_count


def rotation_only_residual(xi, xk):
    """Angular residuals of the best pure-rotation fit ``x_k ~ R x_i``."""
    R = project_to_so3(xk.T @ xi)
    return np.linalg.norm(np.cross(xi @ R.T, xk), axis=1)


def estimate_relative_pose(xi, xk, rng, config: RansacConfig | None = None):
    """RANSAC 8-point estimate on unit rays.

    Returns ``(R, t, inlier_mask)`` or ``None`` with a logged reason when the
    pair is degenerate or has too few inliers.
    """
    config = config or RansacConfig()
    n = len(xi)
    if n < MIN_POINTS:
        logger.debug("pair skipped: %d correspondences < %d", n, MIN_POINTS)
        return None
    if np.all(rotation_only_residual(xi, xk) < config.threshold):
        logger.debug("pair skipped: rays explained by a pure rotation (zero baseline)")
        return None

    best_mask, best_count = None, -1
    for _ in range(config.iterations):
        sample = rng.choice(n, MIN_POINTS, replace=False)
        E, ratio = essential_8pt(xi[sample], xk[sample])
        if ratio < config.degeneracy_ratio:
            continue
        mask = epipolar_error(E, xi, xk) < config.threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            if count == n:
                break
    if best_mask is None or best_count < max(config.min_inliers, MIN_POINTS):
        logger.debug("pair skipped: %d inliers", max(best_count, 0))
        return None

    # refit on all inliers, then refresh the inlier set once
    for _ in range(2):
        E, ratio = essential_8pt(xi[best_mask], xk[best_mask])
        if ratio < config.degeneracy_ratio:
            logger.debug("pair skipped: degenerate inlier configuration")
            return None
        mask = epipolar_error(E, xi, xk) < config.threshold
        if mask.sum() < MIN_POINTS:
            break
        best_mask = mask
    R, t, _ = decompose_essential(E, xi[best_mask], xk[best_mask])
    return R, normalize(t), best_mask


def translation_direction(c):
    """Unit ``t`` minimizing ``sum (t . c_j)^2`` (smallest eigenvector)."""
    _, V = np.linalg.eigh(c.T @ c)
    return V[:, 0]


def refine_direction(R, xi, xk, rng, iterations: int = 200, threshold: float = 5e-3):
    """Translation direction with known relative rotation.

    Each correspondence gives ``t . ((R x_i) x x_k) = 0``.  Two samples fix
    ``t`` up to sign; RANSAC picks the largest consensus, the least-squares
    eigenvector refines it and a cheirality vote fixes the sign.
    Returns ``(t, inlier_mask)`` or ``None``.
    """
    c = np.cross(xi @ R.T, xk)
    n = len(c)
    if n < 2:
        return None
    best_mask, best_count = None, -1
    for _ in range(iterations):
        a, b = rng.choice(n, 2, replace=False)
        t = np.cross(c[a], c[b])
        nt = np.linalg.norm(t)
        if nt < 1e-12:
            continue
        mask = np.abs(c @ (t / nt)) < threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            if count == n:
                break
    if best_mask is None or best_count < 2:
        return None
    t = translation_direction(c[best_mask])
    mask = np.abs(c @ t) < threshold
    if mask.sum() >= 2:
        best_mask = mask
        t = translation_direction(c[best_mask])
    di, dk = triangulate_depths(R, t, xi[best_mask], xk[best_mask])
    votes = np.count_nonzero((di > 0) & (dk > 0)) - np.count_nonzero((di < 0) & (dk < 0))
    if votes < 0:
        t = -t
    return t, best_mask


def essential_from_pose(R, t):
    return skew(t) @ R
