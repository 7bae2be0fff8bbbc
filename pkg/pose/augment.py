#!/usr/bin/env python3
"""
Training-image augmentation
Colour jitter, rectangular occlusion and in-plane rotation with the matching
update of the camera label.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from geometry.camera import CameraPose, roll_matrix
from geometry.quaternion import matrix_to_quat

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentSettings:
    enabled: bool = True
    color_jitter: float = 0.2
    max_occlusion: float = 0.2
    max_rotation_degrees: float = 10.0

    @classmethod
    def from_config(cls, config) -> 'AugmentSettings':
        return cls(bool(config.AUGMENT), float(config.AUG_COLOR_JITTER), float(config.AUG_MAX_OCCLUSION),
                   float(config.AUG_MAX_ROTATION_DEGREES))


@dataclass
class AugmentResult:
    image: Tensor
    rotation: float = 0.0
    occlusion: Optional[Tuple[int, int, int, int]] = None  # x0, y0, width, height


def rotate_pixels(pixels: Tensor, angle: float, cx: float, cy: float) -> Tensor:
    """Where pixels land when image content turns counter-clockwise on screen by `angle`"""
    c, s = math.cos(angle), math.sin(angle)
    du = pixels[..., 0] - cx
    dv = pixels[..., 1] - cy
    # image v points down, so a counter-clockwise turn on screen is (c, s; -s, c)
    return torch.stack([cx + c * du + s * dv, cy - s * du + c * dv], dim=-1)


def rotate_pose_label(pose: CameraPose, angle: float) -> CameraPose:
    """Camera label after the image is rotated by `angle`: roll changes by -angle"""
    Rz = roll_matrix(-angle, pose.rotation.dtype)
    R = Rz @ pose.rotation_matrix()
    return CameraPose(matrix_to_quat(R), Rz @ pose.translation, pose.intrinsics)


def rotate_image(image: Tensor, angle: float, cx: float, cy: float) -> Tensor:
    """Rotate [H, W, 3] content about (cx, cy); uncovered pixels become black"""
    height, width = image.shape[:2]
    dtype = image.dtype
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing='ij')
    # source of each output pixel is the inverse rotation
    source = rotate_pixels(torch.stack([u, v], dim=-1), -angle, cx, cy)
    grid = torch.stack([2.0 * source[..., 0] / (width - 1) - 1.0,
                        2.0 * source[..., 1] / (height - 1) - 1.0], dim=-1)
    out = F.grid_sample(image.permute(2, 0, 1)[None], grid[None], mode='bilinear',
                        padding_mode='zeros', align_corners=True)
    return out[0].permute(1, 2, 0)


def occlusion_box(rng: np.random.Generator, height: int, width: int,
                  max_fraction: float) -> Tuple[int, int, int, int]:
    """Random rectangle with area at most max_fraction of the image"""
    budget = int(math.floor(max_fraction * height * width))
    area = rng.uniform(0.0, budget)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    box_h = max(1, min(height, int(round(math.sqrt(area * aspect)))))
    box_w = max(0, min(width, budget // box_h, int(round(area / box_h))))
    x0 = int(rng.integers(0, width - box_w + 1))
    y0 = int(rng.integers(0, height - box_h + 1))
    return x0, y0, box_w, box_h


def augment(image: Tensor, rng: np.random.Generator, settings: AugmentSettings,
            principal: Tuple[float, float]) -> AugmentResult:
    """
    Jitter colours, black out one rectangle and rotate about the principal point

    The returned rotation angle is what the label must be rotated by (see
    rotate_pose_label). Disabled settings return the image untouched.
    """
    if not settings.enabled:
        return AugmentResult(image)

    height, width = image.shape[:2]
    scale = rng.uniform(1.0 - settings.color_jitter, 1.0 + settings.color_jitter, size=3)
    out = (image * torch.as_tensor(scale, dtype=image.dtype)).clamp(0.0, 1.0)

    x0, y0, box_w, box_h = occlusion_box(rng, height, width, settings.max_occlusion)
    out = out.clone()
    out[y0:y0 + box_h, x0:x0 + box_w] = 0.0

    angle = math.radians(rng.uniform(-settings.max_rotation_degrees, settings.max_rotation_degrees))
    out = rotate_image(out, angle, principal[0], principal[1])
    return AugmentResult(out, angle, (x0, y0, box_w, box_h))
