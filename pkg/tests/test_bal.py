import io
import os

import numpy as np
import pytest
from conftest import synthetic_bal

from pmba.errors import BalFormatError, DataError
from pmba.geometry import rotation_angle
from pmba.scene.bal import bal_project, bal_to_problem, parse_bal, serialize_bal, write_bal
from pmba.solver import SolverConfig, optimize

CAMERA = ["0.0"] * 6 + ["1.0", "0.0", "0.0"]
MINIMAL = "2 1 2\n0 0 1.0 2.0\n1 0 -1.0 2.0\n" + "\n".join(CAMERA * 2 + ["0.5", "0.1", "-4.0"]) + "\n"

# path to a public BAL problem (<= 50 cameras); the sandbox has no download access
PUBLIC_BAL = os.environ.get("PMBA_PUBLIC_BAL")


def test_minimal_file():
    ds = parse_bal(MINIMAL)
    assert (ds.n_cameras, ds.n_points, ds.n_observations) == (2, 1, 2)
    assert ds.obs_camera.tolist() == [0, 1] and ds.obs_xy.tolist() == [[1.0, 2.0], [-1.0, 2.0]]
    assert ds.points.tolist() == [[0.5, 0.1, -4.0]]
    assert ds.cameras[:, 6].tolist() == [1.0, 1.0]


@pytest.mark.parametrize("text,line", [
    ("2 1\n", 1),
    ("2 1 3\n0 0 1.0 2.0\n1 0 -1.0 2.0\n", 4),
    ("2 1 2\n0 0 1.0 2.0\n5 0 -1.0 2.0\n", 3),
    ("2 1 2\n0 0 1.0 2.0\n1 0 -1.0 x\n", 3),
    ("2 1 2\n0 0 1.0\n", 2),
    (MINIMAL + "7.0\n", 25),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(BalFormatError) as info:
        parse_bal(io.StringIO(text))
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_token_round_trip_of_generated_file():
    ds, _ = synthetic_bal(seed=1, k1=-0.02, k2=0.001)
    assert ds.n_cameras == 10
    text = serialize_bal(ds)
    again = serialize_bal(parse_bal(text))
    assert again == text
    back = parse_bal(again)
    for a, b in ((ds.cameras, back.cameras), (ds.points, back.points), (ds.obs_xy, back.obs_xy)):
        assert np.array_equal(a, b)


def test_write_and_read_file(tmp_path):
    ds, _ = synthetic_bal(n_poses=3, n_features=10, seed=2)
    write_bal(ds, tmp_path / "p.bal")
    assert serialize_bal(parse_bal(tmp_path / "p.bal")) == serialize_bal(ds)


def test_generated_file_recovers_scene_geometry():
    ds, scene = synthetic_bal(seed=3)
    prob, behind = bal_to_problem(ds)
    assert not behind.any()
    assert np.abs(prob.p - scene.p).max() < 1e-10
    assert np.max(rotation_angle(prob.R, scene.R)) < 1e-10
    assert np.abs(prob.points() - scene.points).max() < 1e-10


def test_conversion_preserves_reprojection():
    ds, _ = synthetic_bal(seed=4)
    prob, _ = bal_to_problem(ds)
    o = prob.obs
    local = np.einsum("kji,kj->ki", prob.R[o.pose], ds.points[o.feature] - prob.p[o.pose])
    uv = prob.intrinsics.project(local, o.pose)
    assert np.abs(uv * [1, -1] - ds.obs_xy).max() < 1e-6
    assert np.abs(bal_project(ds, ds.obs_camera, ds.points[ds.obs_point]) - ds.obs_xy).max() < 1e-6


def test_distorted_rays_follow_native_model():
    ds, _ = synthetic_bal(seed=5, k1=-0.05, k2=0.01)
    prob, _ = bal_to_problem(ds)
    assert prob.chi2_uv() < 1e-12
    plain, _ = bal_to_problem(ds, distortion=False)
    assert plain.chi2_uv() > 1e-6


def test_zero_distortion_matches_undistorted_path():
    ds, _ = synthetic_bal(seed=6)
    a, _ = bal_to_problem(ds)
    b, _ = bal_to_problem(ds, distortion=False)
    assert np.array_equal(a.obs.ray, b.obs.ray)


def test_zero_rodrigues_camera_at_origin():
    prob, _ = bal_to_problem(parse_bal(MINIMAL))
    assert np.array_equal(prob.p[0], np.zeros(3))
    # +z forward internally versus -z in the file: a half turn about x
    assert np.allclose(prob.R[0], np.diag([1.0, -1.0, -1.0]))


def test_non_positive_focal_rejected():
    text = MINIMAL.replace("\n1.0\n", "\n0.0\n", 1)
    with pytest.raises(DataError):
        bal_to_problem(parse_bal(text))


def test_non_finite_values_rejected():
    text = MINIMAL.replace("0.1", "nan")
    with pytest.raises(DataError, match="point"):
        bal_to_problem(parse_bal(text))


def test_points_behind_cameras_flagged():
    text = MINIMAL.replace("-4.0", "4.0")
    _, behind = bal_to_problem(parse_bal(text))
    assert behind.tolist() == [True]


@pytest.mark.parametrize("mode", ["pmba", "xyz", "idp"])
def test_modes_agree_on_points(mode):
    ds, scene = synthetic_bal(n_poses=4, n_features=20, seed=7)
    prob, _ = bal_to_problem(ds, mode)
    assert prob.mode == mode
    assert np.allclose(prob.points(), scene.points, atol=1e-9)


def run_public(path):
    ds = parse_bal(path)
    prob, _ = bal_to_problem(ds, "pmba")
    res = optimize(prob, SolverConfig("dl", max_iterations=100))
    return prob.chi2_uv(), res.problem.chi2_uv(), res


@pytest.mark.skipif(PUBLIC_BAL is None, reason="set PMBA_PUBLIC_BAL to a public BAL problem file")
def test_public_problem_improves():
    ds = parse_bal(PUBLIC_BAL)
    assert ds.n_cameras <= 50
    before, after, res = run_public(PUBLIC_BAL)
    assert after * 10 <= before
    assert res.reason in ("converged", "gradient", "max_iterations")
