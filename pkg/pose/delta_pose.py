#!/usr/bin/env python3
"""
Per-frame delta poses
Axis-angle + translation corrections composed on top of initial poses; the
keyframe delta is fixed to zero.
"""

import math

import torch
from torch import Tensor, nn

from geometry.camera import CameraPose
from geometry.quaternion import axis_angle_to_quat, quat_multiply, quat_normalize, quat_rotate


def compose_delta(delta: Tensor, pose: CameraPose) -> CameraPose:
    """R' = R_d R, t' = R_d t + t_d for delta = (omega, t_d)"""
    q_delta = axis_angle_to_quat(delta[:3])
    rotation = quat_multiply(q_delta, quat_normalize(pose.rotation).to(delta.dtype))
    translation = quat_rotate(q_delta, pose.translation.to(delta.dtype)) + delta[3:]
    return CameraPose(rotation, translation, pose.intrinsics)


class DeltaPoseTable(nn.Module):
    """Direct [K, 6] table of per-frame deltas"""

    def __init__(self, num_frames: int, keyframe: int, dtype=torch.float64):
        super().__init__()
        self.num_frames = num_frames
        self.keyframe = keyframe
        self.deltas = nn.Parameter(torch.zeros(num_frames, 6, dtype=dtype))

    def delta(self, frame: int) -> Tensor:
        if frame == self.keyframe:
            return torch.zeros(6, dtype=self.deltas.dtype)
        return self.deltas[frame]

    def compose(self, frame: int, pose: CameraPose) -> CameraPose:
        return compose_delta(self.delta(frame), pose)

    @torch.no_grad()
    def table(self) -> Tensor:
        return torch.stack([self.delta(f) for f in range(self.num_frames)])


class DeltaPoseMLP(nn.Module):
    """Deltas from a sinusoidal time embedding; zero-initialized output layer"""

    def __init__(self, num_frames: int, keyframe: int, hidden: int = 64, frequencies: int = 6,
                 dtype=torch.float64):
        super().__init__()
        self.num_frames = num_frames
        self.keyframe = keyframe
        self.frequencies = frequencies
        self.net = nn.Sequential(
            nn.Linear(2 * frequencies, hidden), nn.ReLU(),
            nn.Linear(hidden, 6),
        ).to(dtype)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def delta(self, frame: int) -> Tensor:
        dtype = self.net[0].weight.dtype
        if frame == self.keyframe:
            return torch.zeros(6, dtype=dtype)
        t = frame / max(self.num_frames - 1, 1)
        bands = (2.0 ** torch.arange(self.frequencies, dtype=dtype)) * math.pi * t
        return self.net(torch.cat([torch.sin(bands), torch.cos(bands)]))

    def compose(self, frame: int, pose: CameraPose) -> CameraPose:
        return compose_delta(self.delta(frame), pose)

    @torch.no_grad()
    def table(self) -> Tensor:
        return torch.stack([self.delta(f) for f in range(self.num_frames)])


def build_delta_poses(kind: str, num_frames: int, keyframe: int, dtype=torch.float64):
    """Factory for the DELTA_POSE_MODEL config key"""
    if kind == 'table':
        return DeltaPoseTable(num_frames, keyframe, dtype)
    if kind == 'mlp':
        return DeltaPoseMLP(num_frames, keyframe, dtype=dtype)
    raise ValueError(f"Unknown delta pose model '{kind}' (expected table or mlp)")
