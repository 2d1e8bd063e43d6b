import numpy as np
import pytest

from pmba.camera import CameraIntrinsics, IntrinsicsTable
from pmba.problem import BaProblem, Observations, PointFeatures
from pmba.scene.export import (
    POINT_HEADER,
    POSE_HEADER,
    atomic_write_text,
    export_geometry,
    export_iterations,
    read_csv,
    read_points,
    read_poses,
)
from pmba.solver import IterationRecord, SolverConfig, optimize


def empty_problem():
    obs = Observations(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 3)))
    return BaProblem(np.zeros((0, 3, 3)), np.zeros((0, 3)),
                     IntrinsicsTable.shared(CameraIntrinsics(1, 1), 0), obs,
                     PointFeatures(np.zeros((0, 3))))


def test_empty_problem_gives_header_only_files(tmp_path):
    paths = export_geometry(empty_problem(), tmp_path)
    assert paths["poses"].read_text() == ",".join(POSE_HEADER) + "\n"
    assert paths["points"].read_text() == ",".join(POINT_HEADER) + "\n"
    assert "element vertex 0" in paths["ply"].read_text()


def test_csv_round_trip_is_bit_exact(tmp_path, default_scene):
    prob = default_scene.problem("pmba")
    prob.p = prob.p + np.random.default_rng(0).normal(size=prob.p.shape) / 3.0
    prob.tags = np.array(default_scene.tags)
    paths = export_geometry(prob, tmp_path, prefix="x_")
    R, p = read_poses(paths["poses"])
    assert np.array_equal(R, prob.R) and np.array_equal(p, prob.p)
    X, tags = read_points(paths["points"])
    assert np.array_equal(X, prob.points())
    assert tags == default_scene.tags


def test_ply_vertex_count(tmp_path, default_scene):
    paths = export_geometry(default_scene.problem("xyz"), tmp_path)
    lines = paths["ply"].read_text().splitlines()
    end = lines.index("end_header")
    assert f"element vertex {default_scene.n_features}" in lines
    assert len(lines) - end - 1 == default_scene.n_features


def test_iteration_csv(tmp_path, default_scene):
    R, p, X = default_scene.perturbed_state()
    res = optimize(default_scene.problem("pmba", R, p, X), SolverConfig("dl"))
    export_iterations(res.records, tmp_path / "it.csv")
    header, rows = read_csv(tmp_path / "it.csv")
    assert tuple(header) == IterationRecord.FIELDS
    assert len(rows) == len(res.records)
    assert float(rows[-1][1]) == res.records[-1].chi2_ray


def test_write_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        atomic_write_text(blocker / "sub" / "x.csv", "a")
    assert [q.name for q in tmp_path.iterdir()] == ["file"]
