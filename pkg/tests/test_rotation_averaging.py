import numpy as np
import pytest
from conftest import gauge_aligned_errors, loop_rotations, random_rotation, synthetic_view_graph

from pmba.errors import DisconnectedGraphError
from pmba.geometry import rotation_angle
from pmba.init.rotation_averaging import (
    ViewGraph,
    chordal_rotation_averaging,
    estimate_eg_pairs,
    refine_translation_directions,
    shared_features,
)
from pmba.scene import SceneSpec, generate_scene

# mean gauge-aligned error (degrees) of the seeded 20-pose loop below, first run
LOOP_REGRESSION_DEG = 0.5834557536487339


def test_single_edge_is_exact(rng):
    R = np.stack([np.eye(3), random_rotation(rng)])
    est = chordal_rotation_averaging(synthetic_view_graph(R, [(0, 1)]))
    assert np.allclose(est[0], np.eye(3))
    assert rotation_angle(est[1], R[1]) < 1e-12


def test_noise_free_triangle(rng):
    R = np.stack([np.eye(3)] + [random_rotation(rng) for _ in range(2)])
    est = chordal_rotation_averaging(synthetic_view_graph(R, [(0, 1), (1, 2), (0, 2)]))
    assert np.max(rotation_angle(est, R)) < 1e-8


def test_noise_free_loop(rng):
    R = loop_rotations(rng, 20)
    R = R[0].T @ R  # reference pose at identity
    pairs = [(i, (i + 1) % 20) for i in range(20)]
    est = chordal_rotation_averaging(synthetic_view_graph(R, pairs))
    assert np.max(rotation_angle(est, R)) < 1e-8


def test_noisy_loop_regression():
    rng = np.random.default_rng(2024)
    R = loop_rotations(rng, 20)
    # each pose linked to its two nearest neighbours on either side
    pairs = [(i, (i + h) % 20) for i in range(20) for h in (1, 2)]
    graph = synthetic_view_graph(R, pairs, rng, noise_deg=1.0)
    err = np.degrees(gauge_aligned_errors(chordal_rotation_averaging(graph), R))
    assert err.mean() < 1.0
    assert err.mean() == pytest.approx(LOOP_REGRESSION_DEG, rel=1e-9)


def test_disconnected_graph_lists_components(rng):
    R = np.stack([random_rotation(rng) for _ in range(5)])
    graph = synthetic_view_graph(R, [(0, 1), (1, 2), (3, 4)])
    with pytest.raises(DisconnectedGraphError) as info:
        chordal_rotation_averaging(graph)
    assert info.value.components == [[0, 1, 2], [3, 4]]
    assert "{3, 4}" in str(info.value)


def test_subset_of_nodes(rng):
    R = np.stack([np.eye(3)] + [random_rotation(rng) for _ in range(3)])
    graph = synthetic_view_graph(R, [(0, 1), (1, 2)])
    est = chordal_rotation_averaging(graph, nodes=[0, 1, 2])
    assert np.isnan(est[3]).all()
    assert np.max(rotation_angle(est[:3], R[:3])) < 1e-10
    assert graph.components([0, 1, 2]) == [[0, 1, 2]]


def test_scene_graph_and_direction_refinement():
    scene = generate_scene(SceneSpec(n_poses=6, n_features=60, layout="arc", seed=7))
    rng = np.random.default_rng(0)
    graph = estimate_eg_pairs(scene.obs, scene.n_poses, rng)
    assert len(graph.edges) > 0 and not graph.skipped
    for e in graph.edges:
        assert rotation_angle(e.R, scene.R[e.k].T @ scene.R[e.i]) < 1e-6
    R = chordal_rotation_averaging(graph)
    R_true = scene.R[0].T @ scene.R
    assert np.max(rotation_angle(R, R_true)) < 1e-8
    refined = refine_translation_directions(graph, scene.obs, R, rng)
    for e in refined.edges:
        d = scene.p[e.k] - scene.p[e.i]
        truth = scene.R[0].T @ d / np.linalg.norm(d)
        assert np.linalg.norm(e.baseline_world(R[e.k]) - truth) < 1e-8


def test_pairs_below_threshold_omitted():
    scene = generate_scene(SceneSpec(n_poses=4, n_features=30, layout="lateral", seed=1))
    counts = {k: len(v) for k, v in shared_features(scene.obs).items()}
    thresh = sorted(counts.values())[len(counts) // 2]
    graph = estimate_eg_pairs(scene.obs, 4, np.random.default_rng(0), min_shared=thresh)
    assert all(counts[(e.i, e.k)] >= thresh for e in graph.edges)
    assert graph.shared == counts


def test_empty_graph_components():
    assert ViewGraph(3, []).components() == [[0], [1], [2]]
