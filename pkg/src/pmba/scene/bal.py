"""Reader/writer for the "Bundle Adjustment in the Large" text format.

BAL cameras map world points by ``P = R X + t`` and project with
``pixel = -f * distort(P_xy / P_z)``, looking down -z.  Internally we use a
camera-to-world rotation with +z forward.  The two are related by a half
turn about the camera x axis, ``D = diag(1, -1, -1)``, which also flips the
sign of the pixel y coordinate.  That flip is applied to observations at
ingestion and undone on export.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from ..camera import IntrinsicsTable
from ..errors import BalFormatError, DataError
from ..geometry import exp_so3, log_so3
from ..problem import BaProblem, Gauge, Observations, features_from_points

FLIP = np.diag([1.0, -1.0, -1.0])


@dataclass
class BalDataset:
    cameras: np.ndarray  # (n_cams, 9): rodrigues(3), t(3), f, k1, k2
    points: np.ndarray  # (n_pts, 3)
    obs_camera: np.ndarray
    obs_point: np.ndarray
    obs_xy: np.ndarray  # (n_obs, 2)

    @property
    def n_cameras(self):
        return len(self.cameras)

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_observations(self):
        return len(self.obs_camera)


def _int(tok, line, what):
    try:
        return int(tok)
    except ValueError:
        raise BalFormatError(f"expected integer {what}, got {tok!r}", line) from None


def _float(tok, line):
    try:
        return float(tok)
    except ValueError:
        raise BalFormatError(f"expected a number, got {tok!r}", line) from None


def parse_bal(stream) -> BalDataset:
    """Parse a BAL problem from a text stream, path-like object or string."""
    if isinstance(stream, (str, bytes)) and "\n" in (stream if isinstance(stream, str) else stream.decode()):
        stream = io.StringIO(stream if isinstance(stream, str) else stream.decode())
    elif not hasattr(stream, "read"):
        with open(stream) as fh:
            return parse_bal(fh)
    lines = stream.read().splitlines()

    ln = 0
    while ln < len(lines) and not lines[ln].split():
        ln += 1
    if ln == len(lines):
        raise BalFormatError("empty file", 1)
    head = lines[ln].split()
    if len(head) != 3:
        raise BalFormatError("header must be 'n_cameras n_points n_observations'", ln + 1)
    n_cams, n_pts, n_obs = (_int(t, ln + 1, "count") for t in head)
    if min(n_cams, n_pts, n_obs) < 0:
        raise BalFormatError("negative count in header", ln + 1)
    ln += 1

    cam = np.empty(n_obs, np.int64)
    pt = np.empty(n_obs, np.int64)
    xy = np.empty((n_obs, 2))
    k = 0
    while k < n_obs:
        if ln >= len(lines):
            raise BalFormatError(f"truncated: expected {n_obs} observations, found {k}", ln + 1)
        toks = lines[ln].split()
        if toks:
            if len(toks) != 4:
                raise BalFormatError(
                    f"observation {k} must have 4 fields 'camera point x y', got {len(toks)}", ln + 1)
            c = _int(toks[0], ln + 1, "camera index")
            q = _int(toks[1], ln + 1, "point index")
            if not 0 <= c < n_cams:
                raise BalFormatError(f"camera index {c} out of range [0, {n_cams})", ln + 1)
            if not 0 <= q < n_pts:
                raise BalFormatError(f"point index {q} out of range [0, {n_pts})", ln + 1)
            cam[k], pt[k] = c, q
            xy[k] = _float(toks[2], ln + 1), _float(toks[3], ln + 1)
            k += 1
        ln += 1

    need = 9 * n_cams + 3 * n_pts
    values = np.empty(need)
    k = 0
    while ln < len(lines):
        toks = lines[ln].split()
        for t in toks:
            if k >= need:
                raise BalFormatError(
                    f"unexpected extra value {t!r}: header declares {n_cams} cameras and {n_pts} points",
                    ln + 1)
            values[k] = _float(t, ln + 1)
            k += 1
        ln += 1
    if k < need:
        raise BalFormatError(f"truncated: expected {need} parameter values, found {k}", len(lines))
    cams = values[:9 * n_cams].reshape(n_cams, 9)
    pts = values[9 * n_cams:].reshape(n_pts, 3)
    return BalDataset(cams, pts, cam, pt, xy)


def serialize_bal(ds: BalDataset) -> str:
    """BAL text with every float written in shortest round-trip form."""
    out = [f"{ds.n_cameras} {ds.n_points} {ds.n_observations}"]
    for c, q, (x, y) in zip(ds.obs_camera.tolist(), ds.obs_point.tolist(), ds.obs_xy.tolist()):
        out.append(f"{c} {q} {x!r} {y!r}")
    out.extend(repr(float(v)) for v in ds.cameras.ravel())
    out.extend(repr(float(v)) for v in ds.points.ravel())
    return "\n".join(out) + "\n"


def write_bal(ds: BalDataset, path) -> None:
    from .export import atomic_write_text

    atomic_write_text(path, serialize_bal(ds))


def bal_project(ds: BalDataset, cam_idx, X):
    """Pixels predicted by the native BAL camera model."""
    c = ds.cameras[cam_idx]
    P = (exp_so3(c[:, :3]) @ X[:, :, None])[:, :, 0] + c[:, 3:6]
    xy = -P[:, :2] / P[:, 2:3]
    r2 = np.sum(xy * xy, axis=1)
    d = 1.0 + c[:, 7] * r2 + c[:, 8] * r2 * r2
    return c[:, 6:7] * d[:, None] * xy


def bal_to_problem(ds: BalDataset, mode: str = "xyz", distortion: bool = True, anchors=None):
    """Convert to a :class:`BaProblem` in the +z-forward convention.

    Returns ``(problem, behind)`` where ``behind`` flags points that lie
    behind every camera observing them.
    """
    for name, arr in (("camera", ds.cameras), ("point", ds.points), ("observation", ds.obs_xy)):
        rows = np.flatnonzero(~np.isfinite(arr).all(axis=1))
        if len(rows):
            raise DataError(f"non-finite {name} values in rows {rows[:10].tolist()}")
    bad = np.flatnonzero(~(ds.cameras[:, 6] > 0))
    if len(bad):
        raise DataError(f"cameras with non-positive focal length: {bad[:10].tolist()}")
    Rb = exp_so3(ds.cameras[:, :3])
    t = ds.cameras[:, 3:6]
    R = np.swapaxes(Rb, 1, 2) @ FLIP
    p = -(np.swapaxes(Rb, 1, 2) @ t[:, :, None])[:, :, 0]
    f = ds.cameras[:, 6]
    zero = np.zeros(ds.n_cameras)
    k1 = ds.cameras[:, 7] if distortion else zero
    k2 = ds.cameras[:, 8] if distortion else zero
    intr = IntrinsicsTable(f, f, zero, zero, k1, k2)
    uv = ds.obs_xy * np.array([1.0, -1.0])
    obs = Observations.from_pixels(ds.obs_camera, ds.obs_point, uv, intr)

    local = np.einsum("kji,kj->ki", R[obs.pose], ds.points[obs.feature] - p[obs.pose])
    front = np.zeros(ds.n_points, bool)
    np.logical_or.at(front, obs.feature, local[:, 2] > 0)
    behind = ~front

    base = BaProblem(R, p, intr, obs, None, Gauge.default(p))
    base.features = features_from_points(base, ds.points, mode, anchors)
    return base, behind


def problem_to_bal(problem: BaProblem) -> BalDataset:
    """Inverse of :func:`bal_to_problem`; requires ``fx == fy`` and zero principal point."""
    it = problem.intrinsics
    if np.any(it.fx != it.fy) or np.any(it.cx != 0) or np.any(it.cy != 0):
        raise ValueError("BAL cameras need fx == fy and a zero principal point")
    Rb = FLIP @ np.swapaxes(problem.R, 1, 2)
    t = -(Rb @ problem.p[:, :, None])[:, :, 0]
    cams = np.column_stack([log_so3(Rb), t, it.fx, it.k1, it.k2])
    o = problem.obs
    return BalDataset(cams, problem.points(), o.pose.copy(), o.feature.copy(),
                      o.uv * np.array([1.0, -1.0]))


def scene_to_bal(R, p, points, obs: Observations, intrinsics) -> BalDataset:
    """BAL dataset from a pinhole scene, shifting pixels to a centred principal point."""
    from ..camera import IntrinsicsTable as _T

    table = intrinsics if isinstance(intrinsics, _T) else _T.shared(intrinsics, len(p))
    if np.any(table.fx != table.fy):
        raise ValueError("BAL cameras need fx == fy")
    Rb = FLIP @ np.swapaxes(R, 1, 2)
    t = -(Rb @ p[:, :, None])[:, :, 0]
    cams = np.column_stack([log_so3(Rb), t, table.fx, table.k1, table.k2])
    centred = obs.uv - np.column_stack([table.cx[obs.pose], table.cy[obs.pose]])
    return BalDataset(cams, np.asarray(points, float).copy(), obs.pose.copy(), obs.feature.copy(),
                      centred * np.array([1.0, -1.0]))
