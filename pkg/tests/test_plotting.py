import numpy as np

from pmba.plotting import plot_convergence, plot_geometry
from pmba.solver import SolverConfig, optimize


def test_png_outputs_are_reproducible(tmp_path, default_scene):
    R, p, X = default_scene.perturbed_state()
    res = optimize(default_scene.problem("pmba", R, p, X), SolverConfig("dl"))
    for k in range(2):
        plot_convergence({"pmba:dl": res.records}, tmp_path / f"c{k}.png")
        plot_geometry(res.problem.p, res.problem.points(), tmp_path / f"g{k}.png",
                      default_scene.tags, default_scene.p, default_scene.points, far_limit=50.0)
    for name in ("c", "g"):
        a, b = ((tmp_path / f"{name}{k}.png").read_bytes() for k in range(2))
        assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == b


def test_geometry_plot_without_points(tmp_path):
    plot_geometry(np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]], np.zeros((0, 3)), tmp_path / "e.png")
    assert (tmp_path / "e.png").stat().st_size > 0
