"""Pinhole camera with a world-to-camera rigid transform.

Pixel (row i, col j) is sampled at (j + 0.5, i + 0.5). Ray directions keep a
camera-space z component of exactly 1, so the ray parameter equals the
camera-space depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def pixel_dirs_world(self) -> np.ndarray:
        """(H, W, 3) world-space ray directions with unit camera-space z."""
        j = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        i = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        u, v = np.meshgrid(j, i)
        d_cam = np.stack([u, v, np.ones_like(u)], axis=-1)
        return d_cam @ self.rotation  # == (R^T d)^T rows

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) pixel sample coordinates (x, y)."""
        x = np.arange(self.width) + 0.5
        y = np.arange(self.height) + 0.5
        gx, gy = np.meshgrid(x, y)
        return np.stack([gx, gy], axis=-1)

    def to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @staticmethod
    def look_at(
        eye,
        target,
        up=(0.0, 0.0, 1.0),
        fx=80.0,
        fy=None,
        width=64,
        height=64,
        cx=None,
        cy=None,
    ) -> "Camera":
        """Camera at `eye` looking toward `target`, +z into the scene."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # forward parallel to up; pick another hint
            upv = np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, upv)
            nr = np.linalg.norm(right)
        right /= nr
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        t = -R @ eye
        fy = fx if fy is None else fy
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return Camera(fx, fy, cx, cy, R, t, width, height)

    def serialize_line(self) -> str:
        vals = [self.fx, self.fy, self.cx, self.cy]
        vals += list(self.rotation.reshape(-1)[:9])
        vals += list(self.translation)
        return " ".join(repr(float(v)) for v in vals)

    @staticmethod
    def from_values(vals, width: int, height: int) -> "Camera":
        vals = [float(v) for v in vals]
        if len(vals) != 16:
            raise ValueError("camera line needs fx fy cx cy + 12 extrinsics")
        R = np.array(vals[4:13]).reshape(3, 3)
        t = np.array(vals[13:16])
        return Camera(vals[0], vals[1], vals[2], vals[3], R, t, width, height)
