import numpy as np
import pytest

from pmba.scene import SceneSpec, generate_scene
from pmba.scene.synthetic import max_subtended_angle


def test_default_scene_shape(default_scene):
    s = default_scene
    assert (s.n_poses, s.n_features) == (4, 10)
    assert sorted(s.tags) == ["collinear", "far"] + ["normal"] * 8


def test_noise_free_residuals_vanish(default_scene):
    for mode in ("pmba", "xyz", "idp"):
        assert default_scene.problem(mode).chi2_uv() < 1e-18


def test_same_seed_is_bitwise_identical():
    a, b = generate_scene(SceneSpec(seed=5, noise_px=1.0)), generate_scene(SceneSpec(seed=5, noise_px=1.0))
    for x, y in ((a.R, b.R), (a.p, b.p), (a.points, b.points), (a.obs.uv, b.obs.uv)):
        assert np.array_equal(x, y)
    c = generate_scene(SceneSpec(seed=6, noise_px=1.0))
    assert not np.array_equal(a.points, c.points)


@pytest.mark.parametrize("layout", ["forward", "lateral", "arc"])
def test_pathology_guarantees(layout):
    spec = SceneSpec(n_poses=5, n_features=30, layout=layout, seed=2, n_far=2,
                     n_collinear=2 if layout == "forward" else 0)
    s = generate_scene(spec)
    base = np.max(np.linalg.norm(s.p[:, None] - s.p[None], axis=-1))
    for j, tag in enumerate(s.tags):
        observers = s.obs.pose[s.obs.feature == j]
        assert len(observers) >= 2
        if tag == "far":
            assert np.linalg.norm(s.points[j] - s.p.mean(axis=0)) > 100 * base
        if tag == "collinear":
            assert max_subtended_angle(s.p, s.points[j], observers) < 1e-3


def test_minimal_scene():
    s = generate_scene(SceneSpec(n_poses=2, n_features=1))
    assert s.n_features == 1 and s.tags == ["normal"] and len(s.obs) == 2


@pytest.mark.parametrize("bad", [dict(n_poses=1), dict(n_features=0), dict(n_far=20),
                                 dict(layout="arc", n_collinear=1)])
def test_infeasible_specs_rejected(bad):
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(**bad))


def test_perturbed_state_is_seeded(default_scene):
    a = default_scene.perturbed_state(seed=3)
    b = default_scene.perturbed_state(seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[1], default_scene.p)
