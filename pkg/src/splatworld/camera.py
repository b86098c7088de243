"""Pinhole camera model (x right, y down, z forward)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # (3, 3) world-to-camera rotation
    t: np.ndarray  # (3,) world-to-camera translation, meters

    def __post_init__(self):
        self.R = np.ascontiguousarray(self.R, dtype=np.float64)
        self.t = np.ascontiguousarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-9:
            raise InvalidParameterError("camera rotation is not orthonormal")

    def world_to_view(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @classmethod
    def identity(cls, fx, fy, width, height, cx=None, cy=None):
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, -1.0, 0.0), cx=None, cy=None):
        """Camera at `eye` looking toward `target`; `up` is the world up direction."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise InvalidParameterError("look_at eye and target coincide")
        fwd = fwd / n
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
        if rn < 1e-9:  # forward parallel to up: pick an arbitrary right axis
            upv = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
            right = np.cross(fwd, upv)
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera x, y, z in world
        t = -R @ eye
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, R, t)


def orbit_cameras(center, radius, count, fx, fy, width, height, elevation=0.0, up=(0.0, -1.0, 0.0)):
    """Turntable ring of `count` cameras around `center` at the given elevation angle."""
    center = np.asarray(center, dtype=np.float64)
    upv = np.asarray(up, dtype=np.float64)
    upv = upv / np.linalg.norm(upv)
    # Build an orthonormal frame around the up axis.
    a = np.array([1.0, 0.0, 0.0]) if abs(upv[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(upv, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(upv, e1)
    cams = []
    for i in range(count):
        phi = 2.0 * np.pi * i / count
        direction = np.cos(elevation) * (np.cos(phi) * e1 + np.sin(phi) * e2) + np.sin(elevation) * upv
        eye = center + radius * direction
        cams.append(Camera.look_at(eye, center, fx, fy, width, height, up=up))
    return cams
