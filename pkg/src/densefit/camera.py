"""Full-perspective pinhole camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


EPS_Z = 1e-4  # minimum camera-space depth (meters) for a valid projection


@dataclass(eq=False)
class Camera:
    """Intrinsics + world->camera extrinsics. Immutable value type."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3), world -> camera, det +1
    translation: np.ndarray   # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise CameraError("image size must be at least 1x1")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise CameraError("rotation must be (3, 3) and translation (3,)")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-8):
            raise CameraError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise CameraError("rotation must have determinant +1")
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    def with_translation(self, translation) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.rotation,
                      np.asarray(translation, dtype=np.float64), self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Camera":
        return cls(fx=float(doc["fx"]), fy=float(doc["fy"]),
                   cx=float(doc["cx"]), cy=float(doc["cy"]),
                   rotation=np.asarray(doc["rotation"], dtype=np.float64),
                   translation=np.asarray(doc["translation"], dtype=np.float64),
                   width=int(doc["width"]), height=int(doc["height"]))


def camera_space(camera: Camera, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ camera.rotation.T + camera.translation


def project(camera: Camera, points, eps_z: float = EPS_Z) -> tuple[np.ndarray, np.ndarray]:
    """Project (M, 3) world points to (M, 2) pixels.

    Returns (pixels, valid). Points at or behind the camera plane (depth
    <= eps_z) are flagged invalid and their pixel rows zeroed; the caller
    decides how to treat them.
    """
    cam_pts = camera_space(camera, points)
    z = cam_pts[:, 2]
    valid = z > eps_z
    z_safe = np.where(valid, z, 1.0)
    uv = np.zeros((cam_pts.shape[0], 2))
    uv[:, 0] = np.where(valid, camera.fx * cam_pts[:, 0] / z_safe + camera.cx, 0.0)
    uv[:, 1] = np.where(valid, camera.fy * cam_pts[:, 1] / z_safe + camera.cy, 0.0)
    return uv, valid


def default_focal(width: float, height: float) -> float:
    """Focal-length heuristic sqrt(w^2 + h^2) for a full-image fit."""
    if width < 1 or height < 1:
        raise CameraError("image size must be at least 1x1")
    return float(np.hypot(width, height))


def frame_camera(center, extent: float, width: int, height: int,
                 fill: float = 0.55, yaw: float = 0.0) -> Camera:
    """Place a camera on the +z side looking at `center` so an object of the
    given world extent fills roughly `fill` of the smaller image dimension."""
    focal = default_focal(width, height)
    distance = focal * extent / (fill * min(width, height))
    c, s = np.cos(yaw), np.sin(yaw)
    rotation = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    translation = np.array([0.0, 0.0, distance]) - rotation @ np.asarray(center, dtype=np.float64)
    return Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                  rotation=rotation, translation=translation, width=width, height=height)
