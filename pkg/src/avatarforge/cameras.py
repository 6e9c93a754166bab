"""Pinhole cameras. Convention: +z forward, +y down, world units meters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom


@dataclass
class Camera:
    intrinsics: np.ndarray  # 3x3, positive focal lengths
    rotation: np.ndarray  # 3x3 world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")

    @staticmethod
    def looking_at(eye, center, width: int, height: int, focal: float, up=(0.0, 1.0, 0.0)) -> "Camera":
        R, t = geom.look_at(eye, center, up)
        K = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1.0]])
        return Camera(K, R, t, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def rays_for_pixels(self, pixels: np.ndarray):
        """pixels (N,2) as (row, col) -> unit world-space directions from the center.

        Rays pass through pixel centers (col+0.5, row+0.5).
        """
        pix = np.asarray(pixels, dtype=np.float64)
        u = pix[:, 1] + 0.5
        v = pix[:, 0] + 0.5
        K = self.intrinsics
        d_cam = np.stack([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], np.ones_like(u)], axis=1)
        d_world = d_cam @ self.rotation  # R^T @ d per row
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.center, d_world.shape).copy()
        return origins, d_world

    def project(self, points: np.ndarray):
        """World points (N,3) -> (u, v, depth). u is the column axis."""
        p = np.asarray(points, dtype=np.float64)
        cam = p @ self.rotation.T + self.translation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics[0, 0] * cam[:, 0] / z + self.intrinsics[0, 2]
            v = self.intrinsics[1, 1] * cam[:, 1] / z + self.intrinsics[1, 2]
        return u, v, z

    def to_json(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(doc: dict) -> "Camera":
        return Camera(
            np.array(doc["intrinsics"]),
            np.array(doc["rotation"]),
            np.array(doc["translation"]),
            int(doc["width"]),
            int(doc["height"]),
        )
