"""Pinhole camera model: intrinsics plus a camera-to-world pose."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    """Pinhole camera.

    ``rotation``/``translation`` are the camera-to-world pose: ``rotation``
    maps camera-frame vectors into the world and ``translation`` is the
    camera center in world coordinates.  The camera looks along its +z
    axis; a point with positive camera-space depth is in front.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64)

    def validate(self, tol=1e-6):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose shape mismatch")
        if not np.allclose(r @ r.T, np.eye(3), atol=tol):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation is a reflection (det = -1)")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def downscale(self, factor: int) -> "Camera":
        """Camera for an image downscaled by an integer factor."""
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
            rotation=self.rotation.copy(),
            translation=self.translation.copy(),
        )

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinate grids (xs, ys), each (H, W)."""
        xs = np.arange(self.width, dtype=np.float64) + 0.5
        ys = np.arange(self.height, dtype=np.float64) + 0.5
        return np.meshgrid(xs, ys)

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) unit world-space view directions through pixel centers."""
        xs, ys = self.pixel_centers()
        dirs = np.stack(
            [(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)],
            axis=-1,
        )
        dirs = dirs @ self.rotation.T
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def look_at_camera(position, target, up, fx, fy, width, height, cx=None, cy=None) -> Camera:
    """Build a camera at ``position`` looking toward ``target``.

    The camera +z axis points at the target; +x is chosen right-handed
    against ``up``.  Principal point defaults to the image center.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(-up, forward)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("up vector parallel to view direction")
    right = right / nr
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return Camera(
        fx=fx,
        fy=fy,
        cx=width / 2.0 if cx is None else cx,
        cy=height / 2.0 if cy is None else cy,
        width=width,
        height=height,
        rotation=rotation,
        translation=position,
    )
