"""Pinhole view specification and the RGB+alpha render target.

Camera convention: x right, y down, z forward (points in front of the camera
have positive z). Pixel (row i, col j) covers [j, j+1) x [i, i+1) with its
center at (j + 0.5, i + 0.5); a point projects to x = fx * tx / tz + cx.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor


@dataclass(frozen=True)
class Camera:
    world_to_camera: np.ndarray  # [4, 4] rigid transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        R = w2c[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ValueError("world_to_camera rotation block must be orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]


@dataclass
class ImageBuffer:
    rgb: Tensor    # [H, W, 3] in [0, 1]
    alpha: Tensor  # [H, W] in [0, 1]

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rgb.detach().cpu().numpy(), self.alpha.detach().cpu().numpy()


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera 4x4 with +z toward `target` and y pointing down in
    world (det +1, images come out upright for y-up scenes)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction parallel to up vector")
    x = x / nx
    y = np.cross(z, x)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([x, y, z])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return w2c


@dataclass
class RigConfig:
    """M cameras on a ring, all looking at a common target."""

    num_views: int = 8
    radius: float = 2.4
    height: float = 0.0  # relative to the target height
    resolution: int = 128
    fov_deg: float = 45.0
    near: float = 0.05

    def __post_init__(self):
        if self.num_views < 1 or self.radius <= 0 or self.resolution < 16:
            raise ValueError("invalid rig configuration")


def ring_cameras(rig: RigConfig, target) -> list[Camera]:
    target = np.asarray(target, dtype=np.float64)
    res = rig.resolution
    focal = 0.5 * res / np.tan(np.deg2rad(rig.fov_deg) / 2)
    cams = []
    for k in range(rig.num_views):
        ang = 2 * np.pi * k / rig.num_views
        eye = target + np.array(
            [rig.radius * np.cos(ang), rig.height, rig.radius * np.sin(ang)]
        )
        cams.append(
            Camera(
                look_at(eye, target),
                fx=focal,
                fy=focal,
                cx=res / 2,
                cy=res / 2,
                width=res,
                height=res,
                near=rig.near,
            )
        )
    return cams
