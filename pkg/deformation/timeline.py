#!/usr/bin/env python3
"""
Deformation timelines
Per-frame node transforms as a parameter table (default) or as a small
time-conditioned MLP; the keyframe is always the identity. Tables are
checkpointed in a versioned little-endian binary layout.
"""

import logging
import math
import os
from typing import List

import numpy as np
import torch
from torch import Tensor, nn

from deformation.skinning import IDENTITY_SHEAR, NodeTransforms
from exceptions import CheckpointFormatError
from geometry.quaternion import quat_canonicalize, quat_normalize

logger = logging.getLogger(__name__)

TIMELINE_MAGIC = b"PAD3RDEF"
TIMELINE_VERSION = 1
HEADER_DTYPE = np.dtype([('magic', 'S8'), ('version', '<u4'), ('frames', '<u4'),
                         ('nodes', '<u4'), ('keyframe', '<u4')])
PARAMS_PER_NODE = 4 + 6 + 3


class DeformationTimeline(nn.Module):
    """
    Direct per-frame parameter table

    rotations [K, M, 4], shears [K, M, 6], translations [K, M, 3] and one
    rigidity logit per node. Entries of the keyframe are never read.
    """

    def __init__(self, num_frames: int, num_nodes: int, keyframe: int, dtype=torch.float64):
        super().__init__()
        if not 0 <= keyframe < num_frames:
            raise ValueError(f"keyframe {keyframe} outside [0, {num_frames})")
        self.num_frames = num_frames
        self.num_nodes = num_nodes
        self.keyframe = keyframe

        rotations = torch.zeros(num_frames, num_nodes, 4, dtype=dtype)
        rotations[..., 0] = 1.0
        self.rotations = nn.Parameter(rotations)
        self.shears = nn.Parameter(torch.tensor(IDENTITY_SHEAR, dtype=dtype).repeat(num_frames, num_nodes, 1))
        self.translations = nn.Parameter(torch.zeros(num_frames, num_nodes, 3, dtype=dtype))
        self.rigidity_logits = nn.Parameter(torch.zeros(num_nodes, dtype=dtype))

    def is_keyframe(self, frame: int) -> bool:
        return int(frame) == self.keyframe

    @property
    def rigidity(self) -> Tensor:
        return torch.sigmoid(self.rigidity_logits)

    def transforms(self, frame: int) -> NodeTransforms:
        if not 0 <= frame < self.num_frames:
            raise IndexError(f"frame {frame} outside [0, {self.num_frames})")
        if self.is_keyframe(frame):
            return NodeTransforms.identity(self.num_nodes, self.rigidity, self.rotations.dtype)
        return NodeTransforms(self.rotations[frame], self.shears[frame], self.translations[frame], self.rigidity)

    @torch.no_grad()
    def renormalize_(self):
        """Project rotations back to unit quaternions, reset the keyframe"""
        self.rotations.copy_(quat_normalize(self.rotations))
        self.rotations[self.keyframe] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=self.rotations.dtype)
        self.shears[self.keyframe] = torch.tensor(IDENTITY_SHEAR, dtype=self.shears.dtype)
        self.translations[self.keyframe] = 0.0

    def smoothness_loss(self) -> Tensor:
        """Mean squared difference of consecutive frame parameters"""
        if self.num_frames < 2:
            return self.rotations.sum() * 0.0
        params = torch.cat([self.rotations, self.shears, self.translations], dim=-1)
        return ((params[1:] - params[:-1]) ** 2).sum(dim=-1).mean()

    def bake_to_table(self) -> 'DeformationTimeline':
        return self

    def load_transforms(self, frame: int, transforms: NodeTransforms):
        """Copy explicit node transforms into one frame"""
        with torch.no_grad():
            self.rotations[frame] = transforms.rotations
            self.shears[frame] = transforms.shears
            self.translations[frame] = transforms.translations

    def set_rigidity(self, rigidity: Tensor):
        with torch.no_grad():
            p = rigidity.clamp(1e-12, 1.0 - 1e-12).to(self.rigidity_logits.dtype)
            self.rigidity_logits.copy_(torch.log(p) - torch.log1p(-p))


class DeformationMLP(nn.Module):
    """
    Time-conditioned variant with the same interface

    A sinusoidal embedding of the normalized frame index feeds an MLP that
    emits residual rotation/shear/translation for every node. The last layer
    starts at zero, so the initial deformation is the identity.
    """

    def __init__(self, num_frames: int, num_nodes: int, keyframe: int, hidden: int = 128,
                 frequencies: int = 6, dtype=torch.float64):
        super().__init__()
        self.num_frames = num_frames
        self.num_nodes = num_nodes
        self.keyframe = keyframe
        self.frequencies = frequencies
        self.net = nn.Sequential(
            nn.Linear(2 * frequencies, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, num_nodes * PARAMS_PER_NODE),
        ).to(dtype)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        self.rigidity_logits = nn.Parameter(torch.zeros(num_nodes, dtype=dtype))

    def is_keyframe(self, frame: int) -> bool:
        return int(frame) == self.keyframe

    @property
    def rigidity(self) -> Tensor:
        return torch.sigmoid(self.rigidity_logits)

    def embed(self, frame: int) -> Tensor:
        dtype = self.rigidity_logits.dtype
        t = torch.tensor(frame / max(self.num_frames - 1, 1), dtype=dtype)
        bands = (2.0 ** torch.arange(self.frequencies, dtype=dtype)) * math.pi * t
        return torch.cat([torch.sin(bands), torch.cos(bands)])

    def transforms(self, frame: int) -> NodeTransforms:
        if not 0 <= frame < self.num_frames:
            raise IndexError(f"frame {frame} outside [0, {self.num_frames})")
        dtype = self.rigidity_logits.dtype
        if self.is_keyframe(frame):
            return NodeTransforms.identity(self.num_nodes, self.rigidity, dtype)
        out = self.net(self.embed(frame)).reshape(self.num_nodes, PARAMS_PER_NODE)
        identity_q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype)
        rotations = quat_normalize(identity_q + out[:, :4])
        shears = torch.tensor(IDENTITY_SHEAR, dtype=dtype) + out[:, 4:10]
        return NodeTransforms(rotations, shears, out[:, 10:], self.rigidity)

    def renormalize_(self):
        pass

    def smoothness_loss(self) -> Tensor:
        steps = [self.transforms(f) for f in range(self.num_frames)]
        params = torch.stack([torch.cat([s.rotations, s.shears, s.translations], dim=-1) for s in steps])
        return ((params[1:] - params[:-1]) ** 2).sum(dim=-1).mean()

    @torch.no_grad()
    def bake_to_table(self) -> DeformationTimeline:
        """Evaluate every frame into an equivalent parameter table"""
        table = DeformationTimeline(self.num_frames, self.num_nodes, self.keyframe, self.rigidity_logits.dtype)
        for frame in range(self.num_frames):
            if not self.is_keyframe(frame):
                table.load_transforms(frame, self.transforms(frame))
        table.rigidity_logits.copy_(self.rigidity_logits)
        return table


def build_timeline(kind: str, num_frames: int, num_nodes: int, keyframe: int, dtype=torch.float64):
    """Timeline factory for the DEFORMATION_MODEL config key"""
    if kind == 'table':
        return DeformationTimeline(num_frames, num_nodes, keyframe, dtype)
    if kind == 'mlp':
        return DeformationMLP(num_frames, num_nodes, keyframe, dtype=dtype)
    raise ValueError(f"Unknown deformation model '{kind}' (expected table or mlp)")


def save_timeline(timeline, path: str) -> str:
    """
    Write the binary checkpoint

    Layout: magic "PAD3RDEF", version u32, frames u32, nodes u32, keyframe
    u32, then little-endian f64 rotations [K, M, 4], shears [K, M, 6],
    translations [K, M, 3] and rigidity logits [M].
    """
    table = timeline.bake_to_table()
    header = np.array([(TIMELINE_MAGIC, TIMELINE_VERSION, table.num_frames, table.num_nodes, table.keyframe)],
                      dtype=HEADER_DTYPE)
    rotations = quat_canonicalize(quat_normalize(table.rotations.detach()))
    blocks = [rotations, table.shears.detach(), table.translations.detach(), table.rigidity_logits.detach()]

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        for block in blocks:
            f.write(block.cpu().numpy().astype('<f8').tobytes())
    logger.debug(f"Saved timeline ({table.num_frames} frames, {table.num_nodes} nodes) to {path}")
    return path


def load_timeline(path: str, dtype=torch.float64) -> DeformationTimeline:
    with open(path, 'rb') as f:
        data = f.read()

    if len(data) < HEADER_DTYPE.itemsize:
        raise CheckpointFormatError(f"Truncated timeline header in {path}", offset=len(data))
    header = np.frombuffer(data[:HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
    if bytes(header['magic']) != TIMELINE_MAGIC:
        raise CheckpointFormatError(f"Bad magic {bytes(header['magic'])!r} in {path}", offset=0)
    if int(header['version']) != TIMELINE_VERSION:
        raise CheckpointFormatError(f"Unsupported timeline version {int(header['version'])}", offset=8)

    frames, nodes, keyframe = int(header['frames']), int(header['nodes']), int(header['keyframe'])
    shapes: List[tuple] = [(frames, nodes, 4), (frames, nodes, 6), (frames, nodes, 3), (nodes,)]
    offset = HEADER_DTYPE.itemsize
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        if offset + size > len(data):
            raise CheckpointFormatError(f"Truncated timeline parameters in {path}", offset=len(data))
        arrays.append(np.frombuffer(data[offset:offset + size], dtype='<f8').reshape(shape))
        offset += size
    if offset != len(data):
        raise CheckpointFormatError(f"Trailing bytes in {path}", offset=offset)

    timeline = DeformationTimeline(frames, nodes, keyframe, dtype)
    with torch.no_grad():
        for param, array in zip([timeline.rotations, timeline.shears, timeline.translations,
                                 timeline.rigidity_logits], arrays):
            param.copy_(torch.from_numpy(array.copy()).to(dtype))
    return timeline
