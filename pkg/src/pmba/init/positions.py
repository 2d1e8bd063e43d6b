"""Position-only initialization with rotations and parallax features held fixed.

With fixed rotations and feature values the scaled observation ray of every
observation is linear in the stacked camera positions:

    N_ji = sin(alpha_j - theta_j) Q_j (p_a - p_m) + sin(theta_j) (p_m - p_i)

where ``Q_j`` rotates the anchor baseline direction onto the main-anchor ray
``w_j = R_m n_j``.  Two stages use this form:

* :func:`qplc_bootstrap` minimizes the ray cross products
  ``sum ||[v]_x N||^2`` (``v`` the rotated measured ray) subject to the
  cheirality constraints ``z(R_i^T N) >= 0``: a convex quadratic program.
* :class:`PositionModel` minimizes ``sum ||N/|N| - v||^2`` over positions with
  the generic Newton solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp

from ..errors import InfeasibleProblemError
from ..geometry import exp_so3, normalize, skew, tangent_basis
from ..problem import Gauge, Linearization, Observations, pseudo_huber

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-14
QP_REGULARIZATION = 1e-12


def baseline_rotation(b, w):
    """``(alpha, n_z, Q)`` with ``Q`` turning the unit baseline ``b`` onto the unit ray ``w``.

    ``alpha`` is the angle between ``-b`` and ``w``; ``Q = Exp(n_z (pi - alpha))``.
    """
    b = normalize(np.asarray(b, float))
    w = normalize(np.asarray(w, float))
    cr = np.cross(b, w)
    sn = np.linalg.norm(cr, axis=-1)
    alpha = np.arctan2(sn, -np.sum(b * w, axis=-1))
    # any axis normal to b works when b and w are (anti)parallel
    fallback = tangent_basis(b)[..., :, 0]
    nz = np.where(sn[..., None] > 0.0, cr / np.where(sn > 0.0, sn, 1.0)[..., None], fallback)
    Q = exp_so3(nz * (np.pi - alpha)[..., None])
    return alpha, nz, Q


@dataclass
class ConvexPositionProblem:
    """Barred (fixed) quantities of the position-only problem.

    ``obs`` holds only observations of active features; ``features`` indexes
    rows of ``theta``/``n``/``main``/``assoc``/``baseline``.
    """

    R: np.ndarray
    obs: Observations
    theta: np.ndarray
    n: np.ndarray
    main: np.ndarray
    assoc: np.ndarray
    baseline: np.ndarray  # unit world direction of p_assoc - p_main
    gauge: Gauge
    scale_value: float = 1.0
    alpha: np.ndarray = field(init=False, repr=False)
    nz: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = (self.R[self.main] @ self.n[:, :, None])[:, :, 0]
        self.alpha, self.nz, self.Q = baseline_rotation(self.baseline, w)
        o = self.obs
        self._c = np.sin(self.alpha - self.theta)[o.feature]
        self._s = np.sin(self.theta)[o.feature]
        self._v = (self.R[o.pose] @ o.ray[:, :, None])[:, :, 0]

    @property
    def n_poses(self):
        return len(self.R)

    def blocks(self):
        """Per-observation ``(idx (O,3), coeff (O,3,3,3))`` with ``N = sum_s coeff_s p_idx_s``."""
        o = self.obs
        m, a = self.main[o.feature], self.assoc[o.feature]
        cQ = self._c[:, None, None] * self.Q[o.feature]
        sI = self._s[:, None, None] * np.eye(3)
        idx = np.stack([m, a, o.pose], axis=1)
        coeff = np.stack([sI - cQ, cQ, -sI], axis=1)
        return idx, coeff

    def design_matrix(self) -> sp.csr_matrix:
        """Sparse ``A`` with stacked ``N = A @ p.ravel()``."""
        idx, coeff = self.blocks()
        O = len(idx)
        rows = np.broadcast_to(np.arange(O)[:, None, None, None] * 3 + np.arange(3)[None, None, :, None],
                               (O, 3, 3, 3))
        cols = idx[:, :, None, None] * 3 + np.arange(3)[None, None, None, :]
        cols = np.broadcast_to(cols, (O, 3, 3, 3))
        return sp.coo_matrix((coeff.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(3 * O, 3 * self.n_poses)).tocsr()

    def scaled_rays(self, p):
        """``N`` for every observation, evaluated term by term."""
        o = self.obs
        m, a = self.main[o.feature], self.assoc[o.feature]
        rot = (self.Q[o.feature] @ (p[a] - p[m])[:, :, None])[:, :, 0]
        return self._c[:, None] * rot + self._s[:, None] * (p[m] - p[o.pose])

    def objective(self, p, robust_scale=None) -> float:
        """``h(p) = sum ||N/|N| - v||^2``; zero-norm rays contribute nothing."""
        e, _ = self._residuals(p)
        s = np.sum(e * e, axis=1)
        if robust_scale is not None:
            s, _ = pseudo_huber(s, robust_scale)
        return float(np.sum(s))

    def _residuals(self, p):
        N = self.scaled_rays(p)
        nn = np.linalg.norm(N, axis=1)
        ok = nn > ZERO_NORM
        e = np.zeros_like(N)
        e[ok] = N[ok] / nn[ok, None] - self._v[ok]
        return e, ok

    def cross_objective(self, p) -> float:
        """QPLC objective ``sum ||v x N||^2``."""
        c = np.cross(self._v, self.scaled_rays(p))
        return float(np.sum(c * c))

    def cheirality(self, p):
        """Local forward component ``z(R_i^T N)`` of every predicted ray."""
        N = self.scaled_rays(p)
        return np.einsum("kj,kj->k", self.R[self.obs.pose][:, :, 2], N)

    def gauge_values(self, baseline_sign: float = 1.0):
        """Fixed coordinates: reference position at the origin, one scale coordinate."""
        g = self.gauge
        fixed = g.mask(self.n_poses, 3)
        values = np.zeros((self.n_poses, 3))
        if g.scale_pose is not None:
            values[g.scale_pose, g.scale_axis] = baseline_sign * self.scale_value
        return fixed, values

    def random_start(self, rng, spread: float = 1.0):
        fixed, values = self.gauge_values()
        p = rng.normal(scale=spread, size=(self.n_poses, 3))
        return np.where(fixed, values, p)

    def model(self, p, robust_scale=None) -> "PositionModel":
        return PositionModel(self, np.asarray(p, float).copy(), robust_scale)


def build_convex_problem(R, obs: Observations, theta, n, main, assoc, baseline, gauge: Gauge,
                         scale_value: float, active=None) -> ConvexPositionProblem:
    """Restrict to ``active`` features (all by default) and assemble the barred data."""
    if active is None:
        active = np.ones(len(theta), bool)
    keep = active[obs.feature]
    return ConvexPositionProblem(R, obs.subset(keep), theta, n, main, assoc, baseline, gauge,
                                 scale_value)


# ---------------------------------------------------------------------------
# QPLC


@dataclass
class QplcResult:
    p: np.ndarray
    objective: float
    regularized: bool
    active_constraints: int
    unconstrained_feasible: bool
    min_cheirality: float


def solve_ldp(E, f):
    """Least distance program ``min ||u|| s.t. E u >= f`` via NNLS.

    Raises :class:`InfeasibleProblemError` when the constraints are
    inconsistent.
    """
    m, n = E.shape
    G = np.vstack([E.T, f[None, :]])
    h = np.zeros(n + 1)
    h[-1] = 1.0
    w, _ = scipy.optimize.nnls(G, h, maxiter=50 * max(m, 1))
    r = G @ w - h
    if np.linalg.norm(r) <= 1e-12 or abs(r[-1]) <= 1e-300:
        raise InfeasibleProblemError("cheirality constraints are infeasible")
    return -r[:n] / r[-1]


def qplc_bootstrap(problem: ConvexPositionProblem, enforce_cheirality: bool = True,
                   baseline_sign: float = 1.0) -> QplcResult:
    """Positions minimizing the ray cross products under cheirality constraints.

    Gauge coordinates are fixed to their values from
    :meth:`ConvexPositionProblem.gauge_values`.  The unconstrained minimizer
    is computed first; if it already satisfies every constraint it is the
    answer, otherwise the inequality-constrained problem is reduced to a least
    distance program and solved with an active-set NNLS.
    """
    A = problem.design_matrix()
    o = problem.obs
    O = len(o)
    # [v]_x per observation as a block-diagonal operator
    Sv = sp.block_diag([skew(v) for v in problem._v], format="csr") if O else sp.csr_matrix((0, 0))
    G_full = (Sv @ A).toarray()
    fixed, values = problem.gauge_values(baseline_sign)
    fixed = fixed.ravel()
    x0 = values.ravel()
    G = G_full[:, ~fixed]
    h = G_full[:, fixed] @ x0[fixed]
    if not np.any(G):
        raise InfeasibleProblemError("QPLC data are all zero; positions are unconstrained")

    H = G.T @ G
    regularized = False
    ev = np.linalg.eigvalsh(H)
    if ev[0] <= QP_REGULARIZATION * max(ev[-1], 1.0):
        H = H + QP_REGULARIZATION * np.eye(len(H))
        regularized = True
        logger.info("QPLC quadratic form rank-deficient; regularized by %.0e I", QP_REGULARIZATION)
    L = scipy.linalg.cholesky(H, lower=True)
    b = G.T @ h
    y = -scipy.linalg.cho_solve((L, True), b)

    # cheirality rows: z(R_i^T N) = Cz @ x
    Z = sp.coo_matrix((problem.R[o.pose][:, :, 2].ravel(),
                       (np.repeat(np.arange(O), 3), np.arange(3 * O))), shape=(O, 3 * O)).tocsr()
    C_full = (Z @ A).toarray()
    C = C_full[:, ~fixed]
    d = -C_full[:, fixed] @ x0[fixed]

    feasible = bool(np.all(C @ y >= d)) if O else True
    n_active = 0
    if enforce_cheirality and not feasible:
        # with u = L^T y + L^-1 b the objective is ||u||^2 + const
        Linv_b = scipy.linalg.solve_triangular(L, b, lower=True)
        LT_inv = scipy.linalg.solve_triangular(L.T, np.eye(len(L)), lower=False)
        E = C @ LT_inv
        f = d + E @ Linv_b
        u = solve_ldp(E, f)
        y = LT_inv @ (u - Linv_b)
        n_active = int(np.count_nonzero(np.abs(C @ y - d) <= 1e-9 * (1.0 + np.abs(d))))
    x = x0.copy()
    x[~fixed] = y
    p = x.reshape(-1, 3)
    z = problem.cheirality(p)
    return QplcResult(p, problem.cross_objective(p), regularized, n_active, feasible,
                      float(z.min()) if len(z) else 0.0)


# ---------------------------------------------------------------------------
# convex pose graph model for the generic solver


@dataclass
class PositionModel:
    """Solver model: unknowns are camera positions only (``pose_dim`` 3)."""

    data: ConvexPositionProblem
    p: np.ndarray
    robust_scale: float | None = None

    pose_dim = 3
    feat_dim = 0
    n_features = 0

    @property
    def n_poses(self):
        return len(self.p)

    def fixed_mask(self):
        return self.data.gauge.mask(self.n_poses, 3)

    def _weights(self, e):
        s = np.sum(e * e, axis=1)
        if self.robust_scale is None:
            return s, np.ones_like(s)
        return pseudo_huber(s, self.robust_scale)

    def cost(self) -> float:
        e, _ = self.data._residuals(self.p)
        rho, _ = self._weights(e)
        return 0.5 * float(np.sum(rho))

    def zero_norm_count(self) -> int:
        _, ok = self.data._residuals(self.p)
        return int(np.count_nonzero(~ok))

    def linearize(self) -> Linearization:
        d = self.data
        idx, coeff = d.blocks()
        N = d.scaled_rays(self.p)
        nn = np.linalg.norm(N, axis=1)
        ok = nn > ZERO_NORM
        safe = np.where(ok, nn, 1.0)
        Nh = N / safe[:, None]
        e = np.where(ok[:, None], Nh - d._v, 0.0)
        P = (np.eye(3) - Nh[:, :, None] * Nh[:, None, :]) / safe[:, None, None]
        P = np.where(ok[:, None, None], P, 0.0)
        J = P[:, None] @ coeff
        _, wts = self._weights(e)
        sw = np.sqrt(wts)
        e = e * sw[:, None]
        J = J * sw[:, None, None, None]
        fixed = self.fixed_mask()
        J = J * (~fixed[idx])[:, :, None, :]
        O = len(e)
        return Linearization(e, idx, J, np.zeros(O, np.int64), np.zeros((O, 3, 0)),
                             self.n_poses, 0)

    def retract(self, dT, dF=None) -> "PositionModel":
        dT = np.asarray(dT, float).reshape(self.n_poses, 3)
        dT = np.where(self.fixed_mask(), 0.0, dT)
        return replace(self, p=self.p + dT)

    def metrics(self) -> dict:
        return {"chi2_ray": 2.0 * self.cost(), "chi2_uv": float("nan")}


def convex_pose_graph(problem: ConvexPositionProblem, start, config=None, robust_scale=None):
    """Refine positions by minimizing the normalized ray error; returns an ``OptimizeResult``."""
    from ..solver import SolverConfig, optimize

    config = config or SolverConfig(method="lm", diagnostics=False)
    fixed, values = problem.gauge_values()
    p0 = np.where(fixed, values, np.asarray(start, float))
    return optimize(problem.model(p0, robust_scale), config)
