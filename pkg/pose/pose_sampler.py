#!/usr/bin/env python3
"""
Random object-centric camera poses
Area-uniform directions on the sphere, uniform radius band, random roll.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from geometry.camera import CameraPose, Intrinsics, look_at


@dataclass
class PoseSample:
    """A rendered training image and the pose it was rendered from"""
    image: Tensor
    pose: CameraPose


def sample_direction(rng: np.random.Generator) -> np.ndarray:
    z = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * math.cos(phi), r * math.sin(phi), z])


def sample_pose(rng: np.random.Generator, config, intrinsics: Intrinsics,
                centroid: Sequence[float] = (0.0, 0.0, 0.0), dtype=torch.float64) -> CameraPose:
    """
    Camera on a sphere shell around `centroid`, looking at it

    Radius is uniform in [POSE_RADIUS_MIN, POSE_RADIUS_MAX], roll uniform in
    +-POSE_ROLL_DEGREES.
    """
    direction = sample_direction(rng)
    radius = rng.uniform(config.POSE_RADIUS_MIN, config.POSE_RADIUS_MAX)
    roll = math.radians(rng.uniform(-config.POSE_ROLL_DEGREES, config.POSE_ROLL_DEGREES))
    centroid = np.asarray(centroid, dtype=np.float64)
    return look_at(centroid + radius * direction, centroid, intrinsics, roll=roll, dtype=dtype)
