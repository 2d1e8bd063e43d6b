"""Pinhole intrinsics with optional two-term radial distortion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AtPlaneError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float = 0.0
    cy: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def distorted(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0


class IntrinsicsTable:
    """Per-camera intrinsics stored as columns, indexable by pose id arrays."""

    def __init__(self, fx, fy, cx, cy, k1, k2):
        self.fx, self.fy, self.cx, self.cy, self.k1, self.k2 = (
            np.asarray(v, dtype=float) for v in (fx, fy, cx, cy, k1, k2)
        )

    @classmethod
    def shared(cls, intr: CameraIntrinsics, n_cameras: int) -> "IntrinsicsTable":
        cols = [np.full(n_cameras, getattr(intr, k)) for k in ("fx", "fy", "cx", "cy", "k1", "k2")]
        return cls(*cols)

    @classmethod
    def from_list(cls, intrinsics) -> "IntrinsicsTable":
        cols = [[getattr(c, k) for c in intrinsics] for k in ("fx", "fy", "cx", "cy", "k1", "k2")]
        return cls(*cols)

    def __len__(self):
        return len(self.fx)

    def __getitem__(self, i) -> CameraIntrinsics:
        return CameraIntrinsics(
            float(self.fx[i]), float(self.fy[i]), float(self.cx[i]), float(self.cy[i]),
            float(self.k1[i]), float(self.k2[i]),
        )

    def take(self, idx) -> "IntrinsicsTable":
        return IntrinsicsTable(*(getattr(self, k)[idx] for k in ("fx", "fy", "cx", "cy", "k1", "k2")))

    def project(self, local, idx=None, with_jacobian: bool = False):
        """Pixel coordinates of local points; optionally d(pixel)/d(local)."""
        t = self if idx is None else self.take(idx)
        local = np.asarray(local, dtype=float)
        z = local[..., 2]
        if np.any(z == 0.0):
            raise AtPlaneError("point on the camera plane (local z == 0)")
        x = local[..., 0] / z
        y = local[..., 1] / z
        r2 = x * x + y * y
        d = 1.0 + t.k1 * r2 + t.k2 * r2 * r2
        uv = np.stack([t.fx * d * x + t.cx, t.fy * d * y + t.cy], axis=-1)
        if not with_jacobian:
            return uv
        dd_dr2 = t.k1 + 2.0 * t.k2 * r2
        # d(uv)/d(x, y)
        Dxy = np.empty(local.shape[:-1] + (2, 2))
        Dxy[..., 0, 0] = t.fx * (d + 2.0 * x * x * dd_dr2)
        Dxy[..., 0, 1] = t.fx * 2.0 * x * y * dd_dr2
        Dxy[..., 1, 0] = t.fy * 2.0 * x * y * dd_dr2
        Dxy[..., 1, 1] = t.fy * (d + 2.0 * y * y * dd_dr2)
        Dh = np.zeros(local.shape[:-1] + (2, 3))
        Dh[..., 0, 0] = 1.0 / z
        Dh[..., 1, 1] = 1.0 / z
        Dh[..., 0, 2] = -x / z
        Dh[..., 1, 2] = -y / z
        return uv, Dxy @ Dh

    def unproject(self, uv, idx=None, iterations: int = 50):
        """Unit bearing rays for pixels, undistorting by fixed-point iteration."""
        t = self if idx is None else self.take(idx)
        uv = np.asarray(uv, dtype=float)
        xd = (uv[..., 0] - t.cx) / t.fx
        yd = (uv[..., 1] - t.cy) / t.fy
        x, y = xd.copy(), yd.copy()
        if np.any(t.k1 != 0.0) or np.any(t.k2 != 0.0):
            for _ in range(iterations):
                r2 = x * x + y * y
                d = 1.0 + t.k1 * r2 + t.k2 * r2 * r2
                x_new, y_new = xd / d, yd / d
                done = np.max(np.abs(x_new - x) + np.abs(y_new - y), initial=0.0) < 1e-16
                x, y = x_new, y_new
                if done:
                    break
        ray = np.stack([x, y, np.ones_like(x)], axis=-1)
        return ray / np.linalg.norm(ray, axis=-1, keepdims=True)
