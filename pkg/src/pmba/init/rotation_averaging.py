"""View graph construction and chordal rotation averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from ..errors import DisconnectedGraphError
from ..geometry import project_to_so3
from ..problem import Observations
from .twoview import EgPair, RansacConfig, estimate_relative_pose, refine_direction

logger = logging.getLogger(__name__)


@dataclass
class ViewGraph:
    n_poses: int
    edges: list  # EgPair, sorted by (i, k)
    shared: dict = field(default_factory=dict)  # (i, k) -> shared feature count
    skipped: list = field(default_factory=list)  # (i, k, reason)

    def edge_set(self) -> set:
        return {(e.i, e.k) for e in self.edges}

    def components(self, nodes=None):
        """Connected components over ``nodes`` (default: all poses)."""
        nodes = np.arange(self.n_poses) if nodes is None else np.asarray(sorted(nodes))
        index = {int(v): j for j, v in enumerate(nodes)}
        rows, cols = [], []
        for e in self.edges:
            if e.i in index and e.k in index:
                rows.append(index[e.i])
                cols.append(index[e.k])
        A = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
        n, labels = csgraph.connected_components(A, directed=False)
        return [nodes[labels == c].tolist() for c in range(n)]

    def require_connected(self, nodes=None):
        comps = self.components(nodes)
        if len(comps) > 1:
            raise DisconnectedGraphError(comps)


def shared_features(obs: Observations):
    """``{(i, k): feature ids}`` for every co-observing pose pair ``i < k``."""
    by_pose = {}
    for i, j in zip(obs.pose.tolist(), obs.feature.tolist()):
        by_pose.setdefault(i, set()).add(j)
    poses = sorted(by_pose)
    out = {}
    for a, i in enumerate(poses):
        for k in poses[a + 1:]:
            common = by_pose[i] & by_pose[k]
            if common:
                out[(i, k)] = np.array(sorted(common), np.int64)
    return out


def _ray_lookup(obs: Observations):
    return {(int(i), int(j)): r for i, j, r in zip(obs.pose, obs.feature, obs.ray)}


def estimate_eg_pairs(obs: Observations, n_poses: int, rng, min_shared: int = 16,
                      ransac: RansacConfig | None = None) -> ViewGraph:
    """Relative poses for every pair sharing at least ``min_shared`` features."""
    ransac = ransac or RansacConfig()
    rays = _ray_lookup(obs)
    shared = shared_features(obs)
    edges, skipped = [], []
    counts = {}
    for (i, k), feats in sorted(shared.items()):
        counts[(i, k)] = len(feats)
        if len(feats) < max(min_shared, 8):
            continue
        xi = np.array([rays[(i, j)] for j in feats])
        xk = np.array([rays[(k, j)] for j in feats])
        est = estimate_relative_pose(xi, xk, rng, ransac)
        if est is None:
            skipped.append((i, k, "degenerate or too few inliers"))
            continue
        R, t, mask = est
        edges.append(EgPair(i, k, R, t, int(mask.sum()), feats[mask]))
    logger.info("view graph: %d edges, %d pairs skipped", len(edges), len(skipped))
    return ViewGraph(n_poses, edges, counts, skipped)


def chordal_rotation_averaging(graph: ViewGraph, nodes=None, reference: int | None = None):
    """Absolute camera-to-world rotations from relative ones.

    Unknowns are world-to-camera matrices ``W_i = R_i^T`` with ``W_ref = I``.
    Each edge asks ``W_k = R_ik W_i``; the three columns of ``W`` decouple and
    share one sparse least-squares system.  Results are projected onto SO(3).
    Poses outside ``nodes`` are returned as NaN.
    """
    nodes = sorted(range(graph.n_poses) if nodes is None else nodes)
    graph.require_connected(nodes)
    ref = nodes[0] if reference is None else reference
    free = [v for v in nodes if v != ref]
    col = {v: j for j, v in enumerate(free)}
    rows, cols, vals = [], [], []
    rhs_rows = []  # (row offset, edge)
    r = 0
    members = set(nodes)
    edges = [e for e in graph.edges if e.i in members and e.k in members]
    for e in edges:
        for a in range(3):
            if e.k != ref:
                rows.append(r + a)
                cols.append(3 * col[e.k] + a)
                vals.append(1.0)
            if e.i != ref:
                for b in range(3):
                    rows.append(r + a)
                    cols.append(3 * col[e.i] + b)
                    vals.append(-e.R[a, b])
        rhs_rows.append((r, e))
        r += 3
    A = sp.coo_matrix((vals, (rows, cols)), shape=(r, 3 * len(free))).tocsr()

    # residual = A w - b with W_ref = I moved to the right-hand side
    B = np.zeros((r, 3))
    for off, e in rhs_rows:
        if e.i == ref:
            B[off:off + 3] += e.R
        if e.k == ref:
            B[off:off + 3] -= np.eye(3)
    R = np.full((graph.n_poses, 3, 3), np.nan)
    R[ref] = np.eye(3)
    if free:
        AtA = (A.T @ A).tocsc()
        W = spla.splu(AtA).solve(A.T @ B)
        for v in free:
            R[v] = project_to_so3(W[3 * col[v]:3 * col[v] + 3]).T
    return R


def refine_translation_directions(graph: ViewGraph, obs: Observations, R, rng,
                                  iterations: int = 200, threshold: float = 5e-3) -> ViewGraph:
    """Re-estimate every edge direction with the averaged rotations held fixed."""
    rays = _ray_lookup(obs)
    shared = shared_features(obs)
    edges, skipped = [], list(graph.skipped)
    for e in graph.edges:
        feats = shared[(e.i, e.k)]
        Rik = R[e.k].T @ R[e.i]
        xi = np.array([rays[(e.i, j)] for j in feats])
        xk = np.array([rays[(e.k, j)] for j in feats])
        out = refine_direction(Rik, xi, xk, rng, iterations, threshold)
        if out is None:
            skipped.append((e.i, e.k, "direction refinement failed"))
            continue
        t, mask = out
        edges.append(EgPair(e.i, e.k, Rik, t, int(mask.sum()), feats[mask]))
    return ViewGraph(graph.n_poses, edges, dict(graph.shared), skipped)
