#!/usr/bin/env python3
"""
Photometric and ARAP losses
"""

import logging
from dataclasses import dataclass
from typing import Dict

import torch
from torch import Tensor

from exceptions import ShapeMismatchError
from gaussians.splat_renderer import RenderOutput
from geometry.mesh import TriMesh, cotangent_weights

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
MASK_ALPHA_THRESHOLD = 0.5


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    track: float = 0.1
    multi: float = 0.05
    arap: float = 0.5
    smooth: float = 0.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise ValueError(f"Loss weight {name} must be non-negative, got {value}")

    @classmethod
    def from_config(cls, config) -> 'LossWeights':
        return cls(**config.loss_weights)

    def as_dict(self) -> Dict[str, float]:
        return {'rgb': self.rgb, 'track': self.track, 'multi': self.multi, 'arap': self.arap,
                'smooth': self.smooth}

    def combine(self, components: Dict[str, Tensor]) -> Tensor:
        """Weighted sum over the components present"""
        weights = self.as_dict()
        total = None
        for name, value in components.items():
            term = weights[name] * value
            total = term if total is None else total + term
        return total


def _directed_edges(mesh: TriMesh):
    weights = mesh.edge_weights if mesh.edge_weights is not None else cotangent_weights(mesh)
    i, j = weights.edges[:, 0], weights.edges[:, 1]
    return torch.cat([i, j]), torch.cat([j, i]), torch.cat([weights.weights, weights.weights])


def local_rotations(rest_edges: Tensor, deformed_edges: Tensor, weights: Tensor, owner: Tensor,
                    num_vertices: int) -> Tensor:
    """Best rotation per vertex from the weighted edge covariance (det-corrected SVD)"""
    covariance = torch.zeros(num_vertices, 3, 3, dtype=rest_edges.dtype)
    covariance.index_add_(0, owner, weights[:, None, None] * rest_edges[:, :, None] * deformed_edges[:, None, :])
    U, S, Vh = torch.linalg.svd(covariance)
    V = Vh.transpose(-1, -2)
    R = V @ U.transpose(-1, -2)

    flip = torch.det(R) < 0
    if bool(flip.any()):
        V = V.clone()
        V[flip, :, 2] = -V[flip, :, 2]
        R = V @ U.transpose(-1, -2)

    rank = (S > RANK_TOLERANCE * S[:, :1].clamp_min(1e-300)).sum(dim=-1)
    degenerate = (rank < 2) | (S[:, 0] <= 0)
    eye = torch.eye(3, dtype=R.dtype).expand_as(R)
    return torch.where(degenerate[:, None, None], eye, R)


def arap_loss(canonical: TriMesh, deformed: Tensor) -> Tensor:
    """
    sum_v sum_n w_vn ||(v~ - v~_n) - R_v (v - v_n)||^2 / undirected edge count

    R_v is re-estimated on every call and held constant in the backward pass.
    """
    if deformed.shape != canonical.vertices.shape:
        raise ShapeMismatchError(f"Deformed vertices {tuple(deformed.shape)} do not match canonical "
                                 f"{tuple(canonical.vertices.shape)}")
    src, dst, weights = _directed_edges(canonical)
    weights = weights.to(deformed.dtype)
    rest = (canonical.vertices[src] - canonical.vertices[dst]).to(deformed.dtype)
    moved = deformed[src] - deformed[dst]

    with torch.no_grad():
        R = local_rotations(rest, moved.detach(), weights, src, canonical.num_vertices)

    residual = moved - (R[src] @ rest[:, :, None]).squeeze(-1)
    return (weights * (residual ** 2).sum(dim=-1)).sum() / (src.shape[0] // 2)


def rgb_loss(render: RenderOutput, image: Tensor, mask: Tensor) -> Tensor:
    """Per-element MSE over pixels in the target mask or with rendered alpha > 0.5"""
    if render.rgb.shape != image.shape or mask.shape != image.shape[:2]:
        raise ShapeMismatchError(f"Render {tuple(render.rgb.shape)} vs target {tuple(image.shape)} "
                                 f"/ mask {tuple(mask.shape)}")
    region = mask.bool() | (render.alpha.detach() > MASK_ALPHA_THRESHOLD)
    count = int(region.sum())
    if count == 0:
        return render.rgb.sum() * 0.0
    diff = render.rgb[region] - image[region].to(render.rgb.dtype)
    return (diff ** 2).sum() / (3 * count)
