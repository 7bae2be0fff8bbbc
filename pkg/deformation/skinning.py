#!/usr/bin/env python3
"""
Hybrid LBS / DQS skinning
Blends per-frame node transforms onto mesh vertices; node rigidity picks
between the linear and the dual-quaternion branch.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from deformation.control_nodes import ControlNodeSet
from geometry.mesh import TriMesh
from geometry.quaternion import (DualQuaternion, dualquat_normalize, dualquat_transform_points,
                                 quat_normalize, quat_to_matrix, rigid_to_dualquat)

logger = logging.getLogger(__name__)

DQS_NORM_EPS = 1e-8
IDENTITY_SHEAR = (1.0, 1.0, 1.0, 0.0, 0.0, 0.0)


@dataclass
class NodeTransforms:
    """Per-node rotation (M, 4), shear (M, 6), translation (M, 3) and rigidity in [0, 1] (M,)"""
    rotations: Tensor
    shears: Tensor
    translations: Tensor
    rigidity: Tensor

    @classmethod
    def identity(cls, num_nodes: int, rigidity: Optional[Tensor] = None,
                 dtype=torch.float64) -> 'NodeTransforms':
        rotations = torch.zeros(num_nodes, 4, dtype=dtype)
        rotations[:, 0] = 1.0
        return cls(rotations, torch.tensor(IDENTITY_SHEAR, dtype=dtype).repeat(num_nodes, 1),
                   torch.zeros(num_nodes, 3, dtype=dtype),
                   torch.full((num_nodes,), 0.5, dtype=dtype) if rigidity is None else rigidity)

    def shear_matrices(self) -> Tensor:
        return shear_matrix(self.shears)

    def rotation_matrices(self) -> Tensor:
        return quat_to_matrix(quat_normalize(self.rotations))


@dataclass
class SkinningStats:
    """Counters collected while deforming"""
    dqs_fallbacks: int = 0
    deformations: int = 0


def shear_matrix(shears: Tensor) -> Tensor:
    """Symmetric 3x3 from (sxx, syy, szz, sxy, sxz, syz)"""
    sxx, syy, szz, sxy, sxz, syz = shears.unbind(-1)
    return torch.stack([
        torch.stack([sxx, sxy, sxz], dim=-1),
        torch.stack([sxy, syy, syz], dim=-1),
        torch.stack([sxz, syz, szz], dim=-1),
    ], dim=-2)


def _offsets(nodes: ControlNodeSet, vertices: Tensor) -> Tensor:
    """v - p_n for each vertex's neighbours, [V, K, 3]"""
    return vertices[:, None, :] - nodes.rest_positions.to(vertices.dtype)[nodes.neighbor_ids]


def blend_lbs(nodes: ControlNodeSet, transforms: NodeTransforms, vertices: Tensor) -> Tensor:
    """v + sum_n w_n ((R_n S_n - I)(v - p_n) + t_n)"""
    eye = torch.eye(3, dtype=vertices.dtype)
    linear = transforms.rotation_matrices() @ transforms.shear_matrices() - eye
    local = _offsets(nodes, vertices)
    moved = (linear[nodes.neighbor_ids] @ local[..., None]).squeeze(-1) + transforms.translations[nodes.neighbor_ids]
    return vertices + (nodes.neighbor_weights[..., None] * moved).sum(dim=1)


def node_dualquats(nodes: ControlNodeSet, transforms: NodeTransforms) -> DualQuaternion:
    """Rigid part of each node as a world transform: x -> R (x - p) + p + t"""
    q = quat_normalize(transforms.rotations)
    p = nodes.rest_positions.to(q.dtype)
    R = quat_to_matrix(q)
    T = p + transforms.translations - (R @ p[..., None]).squeeze(-1)
    return rigid_to_dualquat(q, T)


def blend_dqs(nodes: ControlNodeSet, transforms: NodeTransforms, vertices: Tensor,
              stats: Optional[SkinningStats] = None) -> Tensor:
    """
    Dual-quaternion skinning with the shear applied as a linear pre-transform

    Each vertex's node quaternions are flipped into the hemisphere of its
    first listed node. Vertices whose blended real part vanishes fall back
    to LBS.
    """
    eye = torch.eye(3, dtype=vertices.dtype)
    shear = transforms.shear_matrices() - eye
    local = _offsets(nodes, vertices)
    weights = nodes.neighbor_weights.to(vertices.dtype)
    sheared = vertices + (weights[..., None] * (shear[nodes.neighbor_ids] @ local[..., None]).squeeze(-1)).sum(dim=1)

    dq = node_dualquats(nodes, transforms)
    real = dq.real[nodes.neighbor_ids]
    dual = dq.dual[nodes.neighbor_ids]
    flip = (real * real[:, :1]).sum(-1, keepdim=True) < 0
    sign = 1.0 - 2.0 * flip.to(real.dtype)
    blended = DualQuaternion((weights[..., None] * sign * real).sum(dim=1),
                             (weights[..., None] * sign * dual).sum(dim=1))

    norm = blended.real.norm(dim=-1)
    degenerate = norm < DQS_NORM_EPS
    safe = DualQuaternion(torch.where(degenerate[:, None], torch.ones_like(blended.real), blended.real),
                          torch.where(degenerate[:, None], torch.zeros_like(blended.dual), blended.dual))
    result = dualquat_transform_points(dualquat_normalize(safe), sheared)

    fallbacks = int(degenerate.sum())
    if stats is not None:
        stats.deformations += 1
        stats.dqs_fallbacks += fallbacks
    if fallbacks:
        logger.debug(f"DQS blend degenerate for {fallbacks} vertices, using LBS there")
        result = torch.where(degenerate[:, None], blend_lbs(nodes, transforms, vertices), result)
    return result


def vertex_rigidity(nodes: ControlNodeSet, rigidity: Tensor) -> Tensor:
    """rho(v) = sum_n w_n r_n / sum_n w_n, [V]"""
    weights = nodes.neighbor_weights.to(rigidity.dtype)
    return (weights * rigidity[nodes.neighbor_ids]).sum(dim=1) / weights.sum(dim=1)


def blend_hybrid(nodes: ControlNodeSet, transforms: NodeTransforms, vertices: Tensor,
                 stats: Optional[SkinningStats] = None) -> Tensor:
    """(1 - rho) LBS + rho DQS"""
    rho = vertex_rigidity(nodes, transforms.rigidity.to(vertices.dtype))[:, None]
    lbs = blend_lbs(nodes, transforms, vertices)
    dqs = blend_dqs(nodes, transforms, vertices, stats)
    return (1.0 - rho) * lbs + rho * dqs


def deform_lbs(nodes: ControlNodeSet, timeline, frame: int, mesh: TriMesh) -> Tensor:
    if timeline.is_keyframe(frame):
        return mesh.vertices
    return blend_lbs(nodes, timeline.transforms(frame), mesh.vertices)


def deform_dqs(nodes: ControlNodeSet, timeline, frame: int, mesh: TriMesh,
               stats: Optional[SkinningStats] = None) -> Tensor:
    if timeline.is_keyframe(frame):
        return mesh.vertices
    return blend_dqs(nodes, timeline.transforms(frame), mesh.vertices, stats)


def deform_hybrid(nodes: ControlNodeSet, timeline, frame: int, mesh: TriMesh,
                  stats: Optional[SkinningStats] = None) -> Tensor:
    """Deformed vertices of `frame`; the keyframe returns the canonical vertices unchanged"""
    if timeline.is_keyframe(frame):
        return mesh.vertices
    return blend_hybrid(nodes, timeline.transforms(frame), mesh.vertices, stats)
