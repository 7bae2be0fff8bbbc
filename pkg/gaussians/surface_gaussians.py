#!/usr/bin/env python3
"""
Surface-anchored Gaussians
Six flat Gaussians per triangle, anchored by barycentric coordinates and
realized in world space from the (possibly deformed) mesh.
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from plyfile import PlyData, PlyElement
from torch import Tensor, nn

from geometry.mesh import TriMesh, face_areas, mean_edge_length

logger = logging.getLogger(__name__)

GAUSSIANS_PER_FACE = 6
EDGE_OFFSET = 0.1
INITIAL_OPACITY = 0.9
INITIAL_COLOR = 0.5
SCALE_FACTOR = 0.35
THICKNESS_FACTOR = 0.01
FRAME_EPS = 1e-12
LOGIT_CLAMP = 1e-4


def anchor_pattern(dtype=torch.float64) -> Tensor:
    """Three centroid-shrunk corner anchors and three off-midpoint edge anchors, each set cycled"""
    corner = [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]
    edge = [0.5, 0.5 * (1.0 - EDGE_OFFSET), 0.5 * EDGE_OFFSET]
    rows = []
    for base in (corner, edge):
        for shift in range(3):
            rows.append(base[-shift:] + base[:-shift] if shift else list(base))
    return torch.tensor(rows, dtype=dtype)


def _logit(p: Tensor) -> Tensor:
    p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return torch.log(p) - torch.log1p(-p)


@dataclass
class WorldGaussians:
    """Gaussians realized in world space for one frame"""
    means: Tensor
    covariances: Tensor
    colors: Tensor
    opacities: Tensor
    active: Tensor

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @classmethod
    def empty(cls, dtype=torch.float64) -> 'WorldGaussians':
        return cls(torch.zeros(0, 3, dtype=dtype), torch.zeros(0, 3, 3, dtype=dtype),
                   torch.zeros(0, 3, dtype=dtype), torch.zeros(0, dtype=dtype),
                   torch.zeros(0, dtype=torch.bool))


class SurfaceGaussianSet(nn.Module):
    """
    Gaussians bound to mesh faces

    Anchors (face, bary) and the normal thickness are frozen buffers; the
    tangential log-scales, colour logits and opacity logits are parameters.
    """

    def __init__(self, face: Tensor, bary: Tensor, log_scales: Tensor, thickness: float,
                 color_logits: Optional[Tensor] = None, opacity_logits: Optional[Tensor] = None):
        super().__init__()
        n = face.shape[0]
        dtype = bary.dtype
        self.register_buffer('face', face.long())
        self.register_buffer('bary', bary)
        self.thickness = float(thickness)
        self.log_scales = nn.Parameter(log_scales.clone())
        if color_logits is None:
            color_logits = _logit(torch.full((n, 3), INITIAL_COLOR, dtype=dtype))
        if opacity_logits is None:
            opacity_logits = _logit(torch.full((n,), INITIAL_OPACITY, dtype=dtype))
        self.color_logits = nn.Parameter(color_logits.clone())
        self.opacity_logits = nn.Parameter(opacity_logits.clone())

    def __len__(self) -> int:
        return int(self.face.shape[0])

    @property
    def scales(self) -> Tensor:
        """Tangential scales, never below the normal thickness"""
        return torch.exp(self.log_scales).clamp_min(self.thickness)

    @property
    def colors(self) -> Tensor:
        return torch.sigmoid(self.color_logits)

    @property
    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def set_colors(self, colors: Tensor):
        with torch.no_grad():
            self.color_logits.copy_(_logit(colors.to(self.color_logits.dtype)))

    def set_opacities(self, opacities: Tensor):
        with torch.no_grad():
            self.opacity_logits.copy_(_logit(opacities.to(self.opacity_logits.dtype)))

    def mean_tangential_scale(self) -> float:
        return float(self.scales.detach().mean())

    def anchor_positions(self, mesh: TriMesh) -> Tensor:
        """Anchor points on `mesh` without building covariances"""
        corners = mesh.vertices[mesh.faces[self.face]]
        return (self.bary[:, :, None] * corners).sum(dim=1)

    def appearance_parameters(self):
        return [self.log_scales, self.color_logits, self.opacity_logits]


def attach_gaussians(mesh: TriMesh, scale_factor: float = SCALE_FACTOR) -> SurfaceGaussianSet:
    """
    Six Gaussians per face at a fixed barycentric pattern

    Initial tangential scale is `scale_factor * sqrt(face area)`, the normal
    thickness 0.01 x mean edge length; opacity 0.9, colour mid-grey.
    """
    dtype = mesh.vertices.dtype
    pattern = anchor_pattern(dtype)
    num_faces = mesh.num_faces

    face = torch.arange(num_faces).repeat_interleave(GAUSSIANS_PER_FACE)
    bary = pattern.repeat(num_faces, 1)

    thickness = THICKNESS_FACTOR * mean_edge_length(mesh)
    area = face_areas(mesh).detach()
    scale = (scale_factor * area.sqrt()).clamp_min(thickness)
    log_scales = torch.log(scale).repeat_interleave(GAUSSIANS_PER_FACE)[:, None].repeat(1, 2)

    logger.info(f"Attached {len(face)} Gaussians to {num_faces} faces (thickness {thickness:.2e})")
    return SurfaceGaussianSet(face, bary, log_scales, thickness)


def face_frames(mesh: TriMesh, vertices: Optional[Tensor] = None):
    """Per-face orthonormal frames [F, 3, 3] with columns (e1, e2, n) and a validity mask"""
    v0, v1, v2 = mesh.face_corners(vertices)
    a = v1 - v0
    cross = torch.cross(a, v2 - v0, dim=-1)
    a_norm = a.norm(dim=-1, keepdim=True)
    c_norm = cross.norm(dim=-1, keepdim=True)
    valid = (c_norm.squeeze(-1) > FRAME_EPS) & (a_norm.squeeze(-1) > FRAME_EPS)

    fallback = torch.eye(3, dtype=a.dtype).expand(a.shape[:-1] + (3, 3))
    e1 = a / a_norm.clamp_min(FRAME_EPS)
    n = cross / c_norm.clamp_min(FRAME_EPS)
    e2 = torch.cross(n, e1, dim=-1)
    frames = torch.stack([e1, e2, n], dim=-1)
    frames = torch.where(valid[..., None, None], frames, fallback)
    return frames, valid


def realize(gaussians: SurfaceGaussianSet, deformed: TriMesh) -> WorldGaussians:
    """
    World means and covariances from the deformed mesh

    Covariance = F diag(s1^2, s2^2, eps^2) F^T with F the deformed face
    frame. Gaussians on degenerate faces are flagged inactive.
    """
    corners = deformed.vertices[deformed.faces[gaussians.face]]
    means = (gaussians.bary.to(corners.dtype)[:, :, None] * corners).sum(dim=1)

    frames, valid = face_frames(deformed)
    frames = frames[gaussians.face]
    scales = gaussians.scales.to(corners.dtype)
    thickness = torch.full_like(scales[:, :1], gaussians.thickness)
    variances = torch.cat([scales, thickness], dim=-1) ** 2
    covariances = (frames * variances[:, None, :]) @ frames.transpose(-1, -2)

    active = valid[gaussians.face]
    if not bool(active.all()):
        logger.debug(f"{int((~active).sum())} Gaussians inactive on degenerate faces")

    return WorldGaussians(means, covariances, gaussians.colors.to(corners.dtype),
                          gaussians.opacities.to(corners.dtype), active)


def export_gaussians_ply(world: WorldGaussians, path: str) -> str:
    """Write realized Gaussians as a PLY point cloud with colour/opacity/scale attributes"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    means = world.means.detach().cpu().numpy()
    colors = np.clip(np.round(world.colors.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    opacity = world.opacities.detach().cpu().numpy()
    scales = np.sqrt(np.clip(np.linalg.eigvalsh(world.covariances.detach().cpu().numpy()), 0.0, None))

    dtype_full = [('x', 'f4'), ('y', 'f4'), ('z', 'f4'),
                  ('red', 'u1'), ('green', 'u1'), ('blue', 'u1'),
                  ('opacity', 'f4'), ('scale_0', 'f4'), ('scale_1', 'f4'), ('scale_2', 'f4'),
                  ('active', 'u1')]
    elements = np.empty(means.shape[0], dtype=dtype_full)
    elements['x'], elements['y'], elements['z'] = means[:, 0], means[:, 1], means[:, 2]
    elements['red'], elements['green'], elements['blue'] = colors[:, 0], colors[:, 1], colors[:, 2]
    elements['opacity'] = opacity
    # eigvalsh sorts ascending: scale_2 is the largest axis
    elements['scale_0'], elements['scale_1'], elements['scale_2'] = scales[:, 0], scales[:, 1], scales[:, 2]
    elements['active'] = world.active.cpu().numpy().astype(np.uint8)

    PlyData([PlyElement.describe(elements, 'vertex')], byte_order='<').write(path)
    logger.debug(f"Exported {means.shape[0]} Gaussians to {path}")
    return path
