"""Schur-complement Newton solvers (Gauss-Newton, Levenberg-Marquardt, dogleg).

The solver is generic over a *model*: anything exposing ``linearize()``,
``cost()``, ``retract(dT, dF)``, ``fixed_mask()`` and ``metrics()``, with
``n_poses``/``pose_dim``/``n_features``/``feat_dim``.  :class:`pmba.problem.BaProblem`
and the position-only model of :mod:`pmba.init.positions` both qualify.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import Linearization

logger = logging.getLogger(__name__)

METHODS = ("gn", "lm", "dl")


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class SolverConfig:
    method: str = "dl"
    max_iterations: int = 200
    initial_lambda: float | None = None  # None -> 1e-4 * mean(diag H)
    initial_radius: float = 1.0
    rel_tol: float = 1e-10
    step_tol: float = 1e-8
    grad_tol: float = 1e-10
    diagnostics: bool = True
    dense_threshold: int = 60
    block_condition_limit: float = 1e14

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("initial_radius", "rel_tol", "step_tol", "grad_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.initial_lambda is not None and not self.initial_lambda > 0:
            raise ValueError("initial_lambda must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class IterationRecord:
    iter: int
    chi2_ray: float
    chi2_uv: float
    step_norm: float
    damping_or_radius: float
    cond_HFF: float
    min_eig_HFF: float
    linear_solves: int
    wall_ms: float

    FIELDS = ("iter", "chi2_ray", "chi2_uv", "step_norm", "damping_or_radius", "cond_HFF",
              "min_eig_HFF", "linear_solves", "wall_ms")

    def as_row(self):
        return [getattr(self, k) for k in self.FIELDS]


@dataclass
class SchurSystem:
    """Normal equations ``H = J^T J`` split into pose (T) and feature (F) parts.

    ``H_TF`` is sparse ``(M*dp, N*df)``; ``H_FF`` is kept as its diagonal
    blocks ``V`` of shape ``(N, df, df)``.  ``fixed`` marks gauge-fixed pose
    parameters, whose rows and columns are zero.
    """

    H_TT: sp.csr_matrix
    H_TF: sp.csr_matrix
    V: np.ndarray
    g_T: np.ndarray
    g_F: np.ndarray
    fixed: np.ndarray
    pose_dim: int
    feat_dim: int
    regularized: list = field(default_factory=list)

    @property
    def n_poses(self):
        return self.H_TT.shape[0] // self.pose_dim if self.pose_dim else 0

    @property
    def n_features(self):
        return len(self.V)

    def gradient(self):
        return np.concatenate([self.g_T, self.g_F.ravel()])

    def dense(self):
        """Full ``(H, g)`` with gauge-fixed parameters removed."""
        nF = self.V.shape[0] * self.feat_dim
        H_FF = _block_diag(self.V, self.feat_dim).toarray() if nF else np.zeros((0, 0))
        H = np.block([[self.H_TT.toarray(), self.H_TF.toarray()],
                      [self.H_TF.T.toarray(), H_FF]])
        keep = np.r_[~self.fixed, np.ones(nF, bool)]
        return H[np.ix_(keep, keep)], self.gradient()[keep]


def _block_diag(blocks, d):
    n = len(blocks)
    return sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(n * d, n * d)).tocsr()


def build_normal_equations(lin: Linearization, fixed=None) -> SchurSystem:
    O, r = lin.residual.shape
    dp, df = lin.pose_dim, lin.feat_dim
    M, N = lin.n_poses, lin.n_features
    nT = M * dp
    S = lin.pose_idx.shape[1] if lin.pose_idx.ndim == 2 else 0

    # sparse pose Jacobian; repeated poses within one observation are summed
    rows = np.broadcast_to((np.arange(O)[:, None, None, None] * r
                            + np.arange(r)[None, None, :, None]), (O, S, r, dp))
    cols = np.broadcast_to(lin.pose_idx[:, :, None, None] * dp
                           + np.arange(dp)[None, None, None, :], (O, S, r, dp))
    used = np.broadcast_to((lin.pose_idx >= 0)[:, :, None, None], (O, S, r, dp))
    JT = sp.coo_matrix((lin.pose_jac[used], (rows[used], cols[used])), shape=(O * r, nT)).tocsr()
    resid = lin.residual.ravel()

    H_TT = (JT.T @ JT).tocsr()
    g_T = JT.T @ resid
    if df:
        frows = np.broadcast_to(np.arange(O * r).reshape(O, r, 1), (O, r, df))
        fcols = lin.feat_idx[:, None, None] * df + np.arange(df)[None, None, :]
        fcols = np.broadcast_to(fcols, (O, r, df))
        JF = sp.coo_matrix((lin.feat_jac.ravel(), (frows.ravel(), fcols.ravel())),
                           shape=(O * r, N * df)).tocsr()
        H_TF = (JT.T @ JF).tocsr()
        V = np.zeros((N, df, df))
        np.add.at(V, lin.feat_idx, np.swapaxes(lin.feat_jac, 1, 2) @ lin.feat_jac)
        g_F = np.zeros((N, df))
        np.add.at(g_F, lin.feat_idx, (np.swapaxes(lin.feat_jac, 1, 2) @ lin.residual[:, :, None])[:, :, 0])
    else:
        H_TF = sp.csr_matrix((nT, 0))
        V = np.zeros((N, 0, 0))
        g_F = np.zeros((N, 0))
    if fixed is None:
        fixed = np.zeros(nT, bool)
    fixed = np.asarray(fixed, bool).ravel()
    return SchurSystem(H_TT, H_TF, V, g_T, g_F, fixed, dp, df)


@dataclass
class ReducedSystem:
    S: sp.csr_matrix
    b: np.ndarray
    V_inv: np.ndarray
    regularized: np.ndarray


def schur_reduce(sys: SchurSystem, lam: float = 0.0, condition_limit: float = 1e14) -> ReducedSystem:
    """Eliminate features: ``S = H_TT + lam I - H_TF (H_FF + lam I)^-1 H_TF^T``."""
    df = sys.feat_dim
    nT = sys.H_TT.shape[0]
    reg = np.zeros(len(sys.V), bool)
    if df and len(sys.V):
        Vd = sys.V + lam * np.eye(df)
        ev = np.linalg.eigvalsh(Vd)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.where(ev[:, 0] > 0, ev[:, -1] / ev[:, 0], np.inf)
        reg = ~(cond <= condition_limit)
        if reg.any():
            tr = np.trace(Vd[reg], axis1=1, axis2=2)
            tr = np.where(tr > 0, tr, 1.0)
            Vd = Vd.copy()
            Vd[reg] += 1e-10 * tr[:, None, None] * np.eye(df)
            logger.debug("regularized %d ill-conditioned feature blocks", int(reg.sum()))
        V_inv = np.linalg.inv(Vd)
        Vi = _block_diag(V_inv, df)
        W = sys.H_TF
        S = sys.H_TT - W @ Vi @ W.T
        b = -sys.g_T + W @ (V_inv @ sys.g_F[:, :, None]).ravel()
    else:
        V_inv = np.zeros((len(sys.V), df, df))
        S = sys.H_TT.copy()
        b = -sys.g_T.copy()
    if lam:
        S = S + lam * sp.identity(nT, format="csr")
    S = sp.csr_matrix(S)
    if sys.fixed.any():
        keep = sp.diags((~sys.fixed).astype(float))
        S = (keep @ S @ keep + sp.diags(sys.fixed.astype(float))).tocsr()
        b = np.where(sys.fixed, 0.0, b)
    sys.regularized = np.flatnonzero(reg).tolist()
    return ReducedSystem(S, b, V_inv, reg)


def solve_reduced(red: ReducedSystem, dense_threshold_rows: int, allow_fallback: bool) -> np.ndarray:
    """Solve the reduced camera system (Cholesky; sparse LU for large systems)."""
    n = red.S.shape[0]
    if n == 0:
        return np.zeros(0)
    if n < dense_threshold_rows:
        A = red.S.toarray()
        A = 0.5 * (A + A.T)
        try:
            c = scipy.linalg.cho_factor(A, check_finite=True)
            x = scipy.linalg.cho_solve(c, red.b)
        except (np.linalg.LinAlgError, ValueError) as exc:
            if not allow_fallback:
                raise SingularSystemError(f"reduced camera system is singular: {exc}") from exc
            x = scipy.linalg.lstsq(A, red.b)[0]
    else:
        try:
            lu = spla.splu(red.S.tocsc())
            x = lu.solve(red.b)
        except RuntimeError as exc:
            if not allow_fallback:
                raise SingularSystemError(f"reduced camera system is singular: {exc}") from exc
            x = spla.lsqr(red.S, red.b, atol=1e-14, btol=1e-14)[0]
    if not np.all(np.isfinite(x)):
        if not allow_fallback:
            raise SingularSystemError("non-finite solution of the reduced camera system")
        x = scipy.linalg.lstsq(red.S.toarray(), red.b)[0]
    return x


def back_substitute(sys: SchurSystem, red: ReducedSystem, dT: np.ndarray) -> np.ndarray:
    """``dF = (H_FF)^-1 (-g_F - H_TF^T dT)`` per feature block."""
    if not sys.feat_dim:
        return np.zeros((len(sys.V), 0))
    rhs = -sys.g_F - (sys.H_TF.T @ dT).reshape(-1, sys.feat_dim)
    return (red.V_inv @ rhs[:, :, None])[:, :, 0]


def solve_newton(sys: SchurSystem, lam: float = 0.0, config: SolverConfig | None = None,
                 allow_fallback: bool = True):
    """Solve ``(H + lam I) dx = -g`` through the Schur complement."""
    config = config or SolverConfig()
    red = schur_reduce(sys, lam, config.block_condition_limit)
    dT = solve_reduced(red, config.dense_threshold * sys.pose_dim, allow_fallback)
    dF = back_substitute(sys, red, dT)
    return dT, dF


def step_gn(sys: SchurSystem, config: SolverConfig | None = None):
    return solve_newton(sys, 0.0, config, allow_fallback=False)


def step_lm(sys: SchurSystem, lam: float, config: SolverConfig | None = None):
    return solve_newton(sys, lam, config, allow_fallback=True)


def dogleg_step(h_gn, h_sd, radius):
    """Blend a Gauss-Newton step and a Cauchy step inside a trust region.

    Returns ``(h, kind)`` with kind one of ``"gn"``, ``"sd"``, ``"blend"``.
    """
    n_gn = np.linalg.norm(h_gn)
    if n_gn <= radius:
        return h_gn, "gn"
    n_sd = np.linalg.norm(h_sd)
    if n_sd >= radius:
        return (radius / n_sd) * h_sd, "sd"
    d = h_gn - h_sd
    a = d @ d
    b = 2.0 * (h_sd @ d)
    c = h_sd @ h_sd - radius * radius
    disc = max(b * b - 4.0 * a * c, 0.0)
    # root of the larger sign, written to avoid cancellation
    beta = (-b + np.sqrt(disc)) / (2.0 * a) if b <= 0 else (-2.0 * c) / (b + np.sqrt(disc))
    return h_sd + beta * d, "blend"


def cauchy_step(lin: Linearization, sys: SchurSystem):
    """Steepest-descent step minimizing the quadratic model along ``-g``."""
    g = sys.gradient()
    gT, gF = _split(sys, g)
    Jg = lin.jvp(gT, gF)
    denom = float(np.sum(Jg * Jg))
    gg = float(g @ g)
    if denom <= 0.0 or gg == 0.0:
        return np.zeros_like(g)
    return -(gg / denom) * g


def _split(sys: SchurSystem, h):
    nT = sys.H_TT.shape[0]
    dT = h[:nT].reshape(-1, sys.pose_dim) if sys.pose_dim else np.zeros((0, 0))
    dF = h[nT:].reshape(-1, sys.feat_dim) if sys.feat_dim else np.zeros((len(sys.V), 0))
    return dT, dF


def condition_diagnostics(sys: SchurSystem) -> dict:
    """Exact per-block eigenvalues of ``H_FF`` and the aggregate condition number."""
    if not sys.feat_dim or not len(sys.V):
        nan = float("nan")
        return {"block_cond": np.zeros(0), "cond": nan, "min_eig": nan, "max_eig": nan,
                "block_min_eig": np.zeros(0)}
    ev = np.linalg.eigvalsh(sys.V)
    lo, hi = ev[:, 0], ev[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        block_cond = np.where(lo > 0, hi / lo, np.inf)
        mn, mx = float(lo.min()), float(hi.max())
        cond = mx / mn if mn > 0 else float("inf")
    return {"block_cond": block_cond, "cond": cond, "min_eig": mn, "max_eig": mx,
            "block_min_eig": lo}


@dataclass
class OptimizeResult:
    problem: object
    records: list
    reason: str
    linear_solves: int
    iterations: int
    regularized_blocks: int = 0

    @property
    def converged(self) -> bool:
        return self.reason in ("converged", "gradient")

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {"reason": self.reason, "iterations": self.iterations,
                "linear_solves": self.linear_solves,
                "final": asdict(last) if last else None}


def _record(it, model, sys, step_norm, damping, solves, t0, diagnostics):
    m = model.metrics()
    if diagnostics:
        d = condition_diagnostics(sys)
        cond, mn = d["cond"], d["min_eig"]
    else:
        cond = mn = float("nan")
    return IterationRecord(it, m["chi2_ray"], m["chi2_uv"], step_norm, damping, cond, mn, solves,
                           (time.perf_counter() - t0) * 1e3)


def optimize(model, config: SolverConfig | None = None) -> OptimizeResult:
    """Minimize ``model.cost()`` with the configured Newton variant.

    Termination reasons: ``converged`` (relative decrease and step both
    tiny), ``gradient`` (gradient infinity-norm below tolerance),
    ``max_iterations``, ``singular`` (GN only), ``stalled`` (damping or trust
    region exhausted without an acceptable step).
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    state = model
    fixed = state.fixed_mask().ravel()
    lin = state.linearize()
    sys = build_normal_equations(lin, fixed)
    F = state.cost()
    solves = 0
    regularized = 0

    lam = config.initial_lambda
    if lam is None:
        diag = np.r_[sys.H_TT.diagonal()[~fixed], np.einsum("nii->ni", sys.V).ravel()]
        lam = 1e-4 * float(np.mean(diag)) if diag.size and np.mean(diag) > 0 else 1e-4
    radius = config.initial_radius
    damping = {"gn": 0.0, "lm": lam, "dl": radius}[config.method]

    records = [_record(0, state, sys, 0.0, damping, 0, t0, config.diagnostics)]
    reason = "max_iterations"
    it = 0
    for it in range(1, config.max_iterations + 1):
        g = sys.gradient()
        if F == 0.0 or (g.size and np.max(np.abs(g)) < config.grad_tol) or not g.size:
            reason = "gradient"
            it -= 1
            break

        if config.method == "gn":
            try:
                dT, dF = step_gn(sys, config)
            except SingularSystemError as exc:
                logger.info("GN stopped: %s", exc)
                solves += 1
                reason = "singular"
                it -= 1
                break
            solves += 1
            regularized += len(sys.regularized)
            h = np.r_[dT.ravel(), dF.ravel()]
            cand = state.retract(dT, dF)
            F_new = cand.cost()
            if not np.isfinite(F_new):
                reason = "singular"
                it -= 1
                break
        elif config.method == "lm":
            accepted = False
            while True:
                dT, dF = step_lm(sys, lam, config)
                solves += 1
                regularized += len(sys.regularized)
                h = np.r_[dT.ravel(), dF.ravel()]
                cand = state.retract(dT, dF)
                F_new = cand.cost()
                pred = _predicted_decrease(lin, sys, h)
                rho = (F - F_new) / pred if pred > 0 else -1.0
                if np.isfinite(F_new) and rho > 0:
                    lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                    accepted = True
                    break
                lam *= 10.0
                if lam > 1e32:
                    break
            damping = lam
            if not accepted:
                reason = "stalled"
                it -= 1
                break
        else:
            dT_gn, dF_gn = solve_newton(sys, 0.0, config, allow_fallback=True)
            solves += 1
            regularized += len(sys.regularized)
            h_gn = np.r_[dT_gn.ravel(), dF_gn.ravel()]
            h_sd = cauchy_step(lin, sys)
            accepted = False
            while True:
                h, _ = dogleg_step(h_gn, h_sd, radius)
                dT, dF = _split(sys, h)
                cand = state.retract(dT, dF)
                F_new = cand.cost()
                pred = _predicted_decrease(lin, sys, h)
                rho = (F - F_new) / pred if pred > 0 else -1.0
                if np.isfinite(F_new) and rho > 0:
                    if rho > 0.75:
                        radius = max(radius, 2.0 * np.linalg.norm(h))
                    elif rho < 0.25:
                        radius *= 0.5
                    accepted = True
                    break
                radius *= 0.5
                if radius < 1e-14:
                    break
            damping = radius
            if not accepted:
                reason = "stalled"
                it -= 1
                break

        step_norm = float(np.linalg.norm(h))
        rel = (F - F_new) / F if F > 0 else 0.0
        state, F = cand, F_new
        lin = state.linearize()
        sys = build_normal_equations(lin, fixed)
        records.append(_record(it, state, sys, step_norm, damping, solves, t0, config.diagnostics))
        if abs(rel) < config.rel_tol and step_norm < config.step_tol:
            reason = "converged"
            break
    else:
        it = config.max_iterations

    return OptimizeResult(state, records, reason, solves, it, regularized)


def _predicted_decrease(lin: Linearization, sys: SchurSystem, h) -> float:
    dT, dF = _split(sys, h)
    Jh = lin.jvp(dT, dF)
    return -float(sys.gradient() @ h) - 0.5 * float(np.sum(Jh * Jh))
