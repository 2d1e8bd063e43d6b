from dataclasses import dataclass

import numpy as np
import pytest
import scipy.sparse as sp

from pmba.problem import Linearization
from pmba.scene import SceneSpec, generate_scene
from pmba.solver import (
    SchurSystem,
    SolverConfig,
    build_normal_equations,
    condition_diagnostics,
    dogleg_step,
    optimize,
    schur_reduce,
    solve_newton,
)


@dataclass
class LinearModel:
    """Residual ``J x - b`` with pose blocks of size 2 and scalar features."""

    pose_jac: np.ndarray  # (O, 2, 2)
    feat_jac: np.ndarray  # (O, 2, 1)
    pose: np.ndarray
    feat: np.ndarray
    b: np.ndarray
    xT: np.ndarray
    xF: np.ndarray

    pose_dim = 2
    feat_dim = 1

    @property
    def n_poses(self):
        return len(self.xT)

    @property
    def n_features(self):
        return len(self.xF)

    def residual(self):
        r = (self.pose_jac @ self.xT[self.pose][:, :, None])[:, :, 0]
        r += (self.feat_jac @ self.xF[self.feat][:, :, None])[:, :, 0]
        return r - self.b

    def linearize(self):
        return Linearization(self.residual(), self.pose[:, None], self.pose_jac[:, None],
                             self.feat, self.feat_jac, self.n_poses, self.n_features)

    def cost(self):
        return 0.5 * float(np.sum(self.residual() ** 2))

    def retract(self, dT, dF):
        return LinearModel(self.pose_jac, self.feat_jac, self.pose, self.feat, self.b,
                           self.xT + dT.reshape(self.xT.shape), self.xF + dF.reshape(self.xF.shape))

    def fixed_mask(self):
        return np.zeros((self.n_poses, 2), bool)

    def metrics(self):
        c = 2 * self.cost()
        return {"chi2_ray": c, "chi2_uv": c}


def linear_model(rng, M=3, N=5, per=3):
    pose = np.repeat(np.arange(M), N * per // M + 1)[: N * per]
    feat = np.tile(np.arange(N), per)
    O = len(pose)
    return LinearModel(rng.normal(size=(O, 2, 2)), rng.normal(size=(O, 2, 1)), pose, feat,
                       rng.normal(size=(O, 2)), np.zeros((M, 2)), np.zeros((N, 1)))


def dense_least_squares(model):
    J = model.linearize().dense_jacobian()
    x0 = np.r_[model.xT.ravel(), model.xF.ravel()]
    r0 = model.residual().ravel()
    return x0 + np.linalg.lstsq(J, -r0, rcond=None)[0]


def random_scene_problem(seed, mode, pathological=True):
    rng = np.random.default_rng(seed)
    extra = {} if pathological else {"n_far": 0, "n_collinear": 0}
    spec = SceneSpec(n_poses=int(rng.integers(2, 7)), n_features=int(rng.integers(3, 30)),
                     layout=["forward", "lateral", "arc"][seed % 3], seed=seed, noise_px=0.5,
                     **extra)
    scene = generate_scene(spec)
    R, p, X = scene.perturbed_state(seed=seed + 1)
    return scene.problem(mode, R, p, X)


# -- linear algebra ----------------------------------------------------------


@pytest.mark.parametrize("mode", ["pmba", "xyz", "idp"])
def test_schur_matches_dense_solution(mode):
    # XYZ far points give cond(H) near 1e17 and get regularized on purpose,
    # so no dense oracle can referee them
    for seed in range(12):
        prob = random_scene_problem(seed, mode, pathological=mode != "xyz")
        assert prob.n_poses + prob.n_features <= 50
        sys = build_normal_equations(prob.linearize(), prob.fixed_mask())
        for lam in (0.0, 1e-3):
            H, g = sys.dense()
            x_ref = np.linalg.solve(H + lam * np.eye(len(H)), -g)
            dT, dF = solve_newton(sys, lam, allow_fallback=False)
            keep = ~sys.fixed
            x = np.r_[dT.ravel()[keep], dF.ravel()]
            assert np.linalg.norm(x - x_ref) <= 1e-8 * np.linalg.norm(x_ref)


def test_reduced_matrix_symmetric(default_scene):
    R, p, X = default_scene.perturbed_state()
    sys = build_normal_equations(default_scene.problem("pmba", R, p, X).linearize())
    S = schur_reduce(sys).S.toarray()
    assert np.abs(S - S.T).max() <= 1e-9 * np.abs(S).max()


def test_block_diagonal_only_system_keeps_pose_block(rng):
    H_TT = sp.csr_matrix(np.diag(rng.uniform(1, 2, 6)))
    sys = SchurSystem(H_TT, sp.csr_matrix((6, 6)), np.stack([np.eye(3)] * 2), rng.normal(size=6),
                      rng.normal(size=(2, 3)), np.zeros(6, bool), 6, 3)
    red = schur_reduce(sys)
    assert np.array_equal(red.S.toarray(), H_TT.toarray())


def test_empty_problem():
    lin = Linearization(np.zeros((0, 2)), np.zeros((0, 1), np.int64), np.zeros((0, 1, 2, 6)),
                        np.zeros(0, np.int64), np.zeros((0, 2, 3)), 0, 0)
    sys = build_normal_equations(lin)
    assert sys.H_TT.shape == (0, 0) and sys.V.shape == (0, 3, 3)
    dT, dF = solve_newton(sys)
    assert dT.size == 0 and dF.size == 0
    assert np.isnan(condition_diagnostics(sys)["cond"])


def test_condition_of_identity_blocks_is_one():
    sys = SchurSystem(sp.csr_matrix((0, 0)), sp.csr_matrix((0, 6)), np.stack([np.eye(3)] * 2),
                      np.zeros(0), np.zeros((2, 3)), np.zeros(0, bool), 6, 3)
    d = condition_diagnostics(sys)
    assert d["cond"] == 1.0 and np.all(d["block_cond"] == 1.0) and d["min_eig"] == 1.0


def test_xyz_very_far_feature_is_ill_conditioned():
    scene = generate_scene(SceneSpec(far_factor=1e6))
    sys = build_normal_equations(scene.problem("xyz").linearize())
    d = condition_diagnostics(sys)
    far = scene.tags.index("far")
    assert d["block_cond"][far] > 1e8


# -- step rules --------------------------------------------------------------


def test_gn_solves_quadratic_in_one_step(rng):
    model = linear_model(rng)
    res = optimize(model, SolverConfig("gn"))
    x = np.r_[res.problem.xT.ravel(), res.problem.xF.ravel()]
    assert np.allclose(x, dense_least_squares(model), atol=1e-10)
    assert res.linear_solves == 1 and res.iterations == 1
    assert res.records[1].step_norm > 0


def test_dogleg_large_radius_returns_gn_step(rng):
    h_gn, h_sd = rng.normal(size=5), rng.normal(size=5)
    h, kind = dogleg_step(h_gn, h_sd, 10 * np.linalg.norm(h_gn))
    assert kind == "gn" and np.array_equal(h, h_gn)


def test_dogleg_small_radius_and_blend(rng):
    h_gn = rng.normal(size=5) * 10
    h_sd = 0.1 * h_gn + rng.normal(size=5) * 0.01
    h, kind = dogleg_step(h_gn, h_sd, 1e-3)
    assert kind == "sd" and np.isclose(np.linalg.norm(h), 1e-3)
    r = 0.5 * (np.linalg.norm(h_sd) + np.linalg.norm(h_gn))
    h, kind = dogleg_step(h_gn, h_sd, r)
    assert kind == "blend" and np.isclose(np.linalg.norm(h), r)


def test_lm_large_damping_approaches_scaled_gradient(default_scene):
    R, p, X = default_scene.perturbed_state()
    sys = build_normal_equations(default_scene.problem("pmba", R, p, X).linearize())
    lam = 1e8
    dT, dF = solve_newton(sys, lam)
    h = np.r_[dT.ravel(), dF.ravel()]
    g = sys.gradient()
    H, _ = sys.dense()
    bound = np.linalg.norm(H, 2) / lam
    assert np.linalg.norm(h * lam + g) <= 2 * bound * np.linalg.norm(g)


# -- optimize ------------------------------------------------------------------


@pytest.mark.parametrize("method", ["lm", "dl"])
def test_accepted_steps_never_increase_chi2(default_scene, method):
    R, p, X = default_scene.perturbed_state(seed=5)
    for mode, key in (("pmba", "chi2_ray"), ("xyz", "chi2_uv")):
        res = optimize(default_scene.problem(mode, R, p, X), SolverConfig(method, max_iterations=50))
        chi = [getattr(r, key) for r in res.records]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(chi, chi[1:]))


@pytest.mark.parametrize("method", ["gn", "lm", "dl"])
def test_ground_truth_start_stops_immediately(default_scene, method):
    res = optimize(default_scene.problem("pmba"), SolverConfig(method))
    assert res.iterations <= 1
    assert res.problem.chi2() < 1e-16


def test_perturbed_noisy_start_reaches_ground_truth_chi2():
    scene = generate_scene(SceneSpec(noise_px=0.5, seed=2))
    gt_chi2 = scene.problem("pmba").chi2()
    R, p, X = scene.perturbed_state(rot_sigma=0.01, pos_sigma=0.05, seed=3)
    res = optimize(scene.problem("pmba", R, p, X), SolverConfig("dl"))
    assert res.converged
    assert res.problem.chi2() <= 1.01 * gt_chi2


def test_parallax_conditioning_stays_low(default_scene):
    R, p, X = default_scene.perturbed_state()
    res = optimize(default_scene.problem("pmba", R, p, X), SolverConfig("dl"))
    assert max(r.cond_HFF for r in res.records) < 1e2
    assert min(r.min_eig_HFF for r in res.records) > 0.38
    xyz = optimize(default_scene.problem("xyz", R, p, X), SolverConfig("dl", max_iterations=3))
    assert xyz.records[0].cond_HFF > 1e10


def test_records_and_determinism(default_scene):
    R, p, X = default_scene.perturbed_state()
    runs = [optimize(default_scene.problem("pmba", R, p, X), SolverConfig("lm")) for _ in range(2)]
    strip = [[r.as_row()[:-1] for r in run.records] for run in runs]
    assert strip[0] == strip[1]
    assert np.array_equal(runs[0].problem.p, runs[1].problem.p)
    rec = runs[0].records
    assert [r.iter for r in rec] == list(range(len(rec)))
    assert all(r.chi2_ray >= 0 and r.chi2_uv >= 0 for r in rec)
    assert rec[-1].linear_solves == runs[0].linear_solves


def test_max_iterations_is_a_reason(default_scene):
    R, p, X = default_scene.perturbed_state()
    res = optimize(default_scene.problem("pmba", R, p, X), SolverConfig("dl", max_iterations=1))
    assert res.reason == "max_iterations" and res.iterations == 1


def test_gn_on_xyz_reports_without_raising(default_scene):
    R, p, X = default_scene.perturbed_state()
    res = optimize(default_scene.problem("xyz", R, p, X), SolverConfig("gn", max_iterations=20))
    assert res.reason in ("singular", "converged", "gradient", "max_iterations")
    assert res.regularized_blocks > 0


@pytest.mark.parametrize("bad", [dict(method="newton"), dict(initial_radius=0.0),
                                 dict(rel_tol=-1.0), dict(initial_lambda=0.0),
                                 dict(max_iterations=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)
