"""CSV/PLY export of geometry and solver logs.

Floats are written with ``repr`` (shortest string that round-trips a double),
so reimporting reproduces every value bit for bit.  Every file is written to
a temporary sibling and renamed into place.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from ..solver import IterationRecord

POSE_HEADER = ["id"] + [f"r{a}{b}" for a in range(3) for b in range(3)] + ["px", "py", "pz"]
POINT_HEADER = ["id", "x", "y", "z", "tag"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return rows[0], rows[1:]


def write_poses(path, R, p) -> None:
    rows = ([i, *R[i].ravel().tolist(), *p[i].tolist()] for i in range(len(p)))
    write_csv(path, POSE_HEADER, rows)


def write_points(path, X, tags=None) -> None:
    tags = [""] * len(X) if tags is None else list(tags)
    write_csv(path, POINT_HEADER, ([j, *X[j].tolist(), tags[j]] for j in range(len(X))))


def read_poses(path):
    _, rows = read_csv(path)
    data = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(-1, 12)
    return data[:, :9].reshape(-1, 3, 3), data[:, 9:]


def read_points(path):
    _, rows = read_csv(path)
    X = np.array([[float(v) for v in r[1:4]] for r in rows]).reshape(-1, 3)
    return X, [r[4] for r in rows]


def ply_text(X) -> str:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(X)}",
             "property double x", "property double y", "property double z", "end_header"]
    lines += [" ".join(repr(float(c)) for c in x) for x in X]
    return "\n".join(lines) + "\n"


def write_ply(path, X) -> None:
    atomic_write_text(path, ply_text(np.asarray(X, float).reshape(-1, 3)))


def export_geometry(problem, directory, prefix: str = "") -> dict:
    """Write ``poses.csv``, ``points.csv`` and ``points.ply``; returns the paths."""
    d = Path(directory)
    X = problem.points() if problem.n_features else np.zeros((0, 3))
    tags = problem.tags if problem.tags is not None and len(problem.tags) == len(X) else None
    paths = {"poses": d / f"{prefix}poses.csv", "points": d / f"{prefix}points.csv",
             "ply": d / f"{prefix}points.ply"}
    write_poses(paths["poses"], problem.R, problem.p)
    write_points(paths["points"], X, tags)
    write_ply(paths["ply"], X)
    return paths


def export_iterations(records, path) -> None:
    write_csv(path, IterationRecord.FIELDS, (r.as_row() for r in records))


def write_stage_reports(path, reports) -> None:
    rows = []
    for r in reports:
        stats = ";".join(f"{k}={_fmt(v)}" for k, v in r.stats.items())
        rows.append([r.stage, stats, " | ".join(r.flags)])
    write_csv(path, ["stage", "stats", "flags"], rows)


def write_partial_artifacts(directory, reports, state) -> None:
    d = Path(directory)
    write_stage_reports(d / "stage_reports.csv", reports)
    R = state.get("R")
    if R is not None:
        p = state.get("p")
        write_poses(d / "partial_poses.csv", R, np.full((len(R), 3), np.nan) if p is None else p)
