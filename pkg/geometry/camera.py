#!/usr/bin/env python3
"""
Pinhole camera model
World-to-camera extrinsics x_cam = R x + t, camera axes x right, y down,
z forward. Pixel centres sit at integer coordinates.
"""

import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Optional, Sequence, Tuple

import torch
from torch import Tensor

from geometry.quaternion import (matrix_to_quat, quat_canonicalize, quat_identity,
                                 quat_normalize, quat_to_matrix)

NEAR_PLANE = 1e-4
MIN_IMAGE_SIZE = 16


@dataclass(frozen=True)
class Intrinsics:
    """Focal length, principal point and image size, all in pixels"""
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width < MIN_IMAGE_SIZE or self.height < MIN_IMAGE_SIZE:
            raise ValueError(f"image size must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, "
                             f"got {self.width}x{self.height}")

    @classmethod
    def default_for(cls, width: int, height: int) -> 'Intrinsics':
        """focal = image width, principal point at the image centre"""
        return cls(float(width), (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def scaled(self, width: int, height: int) -> 'Intrinsics':
        """Same camera for a resized image"""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.focal * sx, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
                          int(width), int(height))

    def to_dict(self) -> Dict[str, Any]:
        return {'focal': self.focal, 'cx': self.cx, 'cy': self.cy,
                'width': self.width, 'height': self.height}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Intrinsics':
        return cls(float(data['focal']), float(data['cx']), float(data['cy']),
                   int(data['width']), int(data['height']))


@dataclass(frozen=True)
class CameraPose:
    """Object-centric 6-DoF pose: unit quaternion (w, x, y, z) and translation"""
    rotation: Tensor
    translation: Tensor
    intrinsics: Intrinsics

    @classmethod
    def identity(cls, intrinsics: Intrinsics, dtype=torch.float64) -> 'CameraPose':
        return cls(quat_identity(dtype=dtype), torch.zeros(3, dtype=dtype), intrinsics)

    @classmethod
    def from_matrix(cls, R: Tensor, t: Tensor, intrinsics: Intrinsics) -> 'CameraPose':
        return cls(matrix_to_quat(R), t, intrinsics)

    def rotation_matrix(self) -> Tensor:
        return quat_to_matrix(quat_normalize(self.rotation))

    def camera_center(self) -> Tensor:
        """Camera position in world coordinates, -R^T t"""
        return -self.rotation_matrix().transpose(-1, -2) @ self.translation

    def world_to_camera(self, points: Tensor) -> Tensor:
        return points @ self.rotation_matrix().transpose(-1, -2) + self.translation

    def canonical(self) -> 'CameraPose':
        return replace(self, rotation=quat_canonicalize(quat_normalize(self.rotation)))

    def detach(self) -> 'CameraPose':
        return CameraPose(self.rotation.detach().clone(), self.translation.detach().clone(), self.intrinsics)

    def to(self, dtype) -> 'CameraPose':
        return CameraPose(self.rotation.to(dtype), self.translation.to(dtype), self.intrinsics)

    def with_intrinsics(self, intrinsics: Intrinsics) -> 'CameraPose':
        return replace(self, intrinsics=intrinsics)

    def to_dict(self) -> Dict[str, Any]:
        q = quat_canonicalize(quat_normalize(self.rotation.detach())).tolist()
        return {'quaternion': q, 'translation': self.translation.detach().tolist(),
                'intrinsics': self.intrinsics.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], intrinsics: Optional[Intrinsics] = None,
                  dtype=torch.float64) -> 'CameraPose':
        intrinsics = intrinsics or Intrinsics.from_dict(data['intrinsics'])
        return cls(torch.tensor(data['quaternion'], dtype=dtype),
                   torch.tensor(data['translation'], dtype=dtype), intrinsics)


def project(pose: CameraPose, points: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Project world points to pixels

    Returns (pixels [..., 2], depth [...], valid [...]); points at or behind
    the near plane are flagged invalid and get a finite placeholder pixel.
    """
    cam = pose.world_to_camera(points)
    depth = cam[..., 2]
    valid = depth > NEAR_PLANE
    safe_depth = torch.where(valid, depth, torch.ones_like(depth))
    k = pose.intrinsics
    u = k.cx + k.focal * cam[..., 0] / safe_depth
    v = k.cy + k.focal * cam[..., 1] / safe_depth
    return torch.stack([u, v], dim=-1), depth, valid


def camera_jacobian(pose: CameraPose, cam_points: Tensor) -> Tensor:
    """d(pixel)/d(camera-space point), shape [..., 2, 3]"""
    f = pose.intrinsics.focal
    x, y, z = cam_points.unbind(-1)
    z = torch.where(z > NEAR_PLANE, z, torch.full_like(z, NEAR_PLANE))
    zero = torch.zeros_like(z)
    row0 = torch.stack([f / z, zero, -f * x / (z * z)], dim=-1)
    row1 = torch.stack([zero, f / z, -f * y / (z * z)], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def project_jacobian(pose: CameraPose, points: Tensor) -> Tensor:
    """d(pixel)/d(world point), shape [..., 2, 3]"""
    cam = pose.world_to_camera(points)
    return camera_jacobian(pose, cam) @ pose.rotation_matrix()


def pixel_rays(pose: CameraPose, pixels: Tensor) -> Tuple[Tensor, Tensor]:
    """
    World-space rays through pixels

    Directions have unit camera-z component, so the ray parameter equals
    camera depth.
    """
    k = pose.intrinsics
    dirs_cam = torch.stack([(pixels[..., 0] - k.cx) / k.focal,
                            (pixels[..., 1] - k.cy) / k.focal,
                            torch.ones_like(pixels[..., 0])], dim=-1)
    dirs = dirs_cam @ pose.rotation_matrix()
    return pose.camera_center(), dirs


def pixel_grid(intrinsics: Intrinsics, dtype=torch.float64) -> Tensor:
    """All pixel centres, shape [H, W, 2] as (u, v)"""
    v, u = torch.meshgrid(torch.arange(intrinsics.height, dtype=dtype),
                          torch.arange(intrinsics.width, dtype=dtype), indexing='ij')
    return torch.stack([u, v], dim=-1)


def roll_matrix(angle: float, dtype=torch.float64) -> Tensor:
    """Rotation about the camera optical axis"""
    c, s = math.cos(angle), math.sin(angle)
    return torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=dtype)


def look_at(eye: Sequence[float], target: Sequence[float], intrinsics: Intrinsics,
            roll: float = 0.0, up: Sequence[float] = (0.0, 1.0, 0.0),
            dtype=torch.float64) -> CameraPose:
    """
    Camera at `eye` with its optical axis through `target`

    `up` is the world direction that appears towards the top of the image;
    `roll` rotates the camera about its optical axis, in radians.
    """
    eye = torch.as_tensor(eye, dtype=dtype)
    target = torch.as_tensor(target, dtype=dtype)
    up = torch.as_tensor(up, dtype=dtype)

    forward = target - eye
    forward = forward / forward.norm()
    right = torch.cross(forward, up, dim=0)
    if right.norm() < 1e-9:
        # looking straight along `up`
        right = torch.cross(forward, torch.tensor([0.0, 0.0, 1.0], dtype=dtype), dim=0)
    right = right / right.norm()
    down = torch.cross(forward, right, dim=0)

    R = torch.stack([right, down, forward], dim=0)
    if roll:
        R = roll_matrix(roll, dtype) @ R
    t = -R @ eye
    return CameraPose(matrix_to_quat(R), t, intrinsics)
