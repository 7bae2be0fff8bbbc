#!/usr/bin/env python3
"""
Differentiable Gaussian splat renderer
Projects world Gaussians with the perspective-affine approximation and
alpha-composites them front to back per pixel. Gradients come from torch
autograd through every step except the depth sort and the culling masks.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from geometry.camera import CameraPose, camera_jacobian, project
from gaussians.surface_gaussians import WorldGaussians

logger = logging.getLogger(__name__)

COVARIANCE_EPS = 1e-6
ALPHA_EPS = 1e-10


@dataclass(frozen=True)
class RenderSettings:
    """Renderer thresholds; cull_sigma=None evaluates every Gaussian at every pixel"""
    cull_sigma: Optional[float] = 3.0
    min_transmittance: float = 1e-4
    max_splat_alpha: float = 0.999
    blur_variance: float = 0.0

    @classmethod
    def from_config(cls, config) -> 'RenderSettings':
        return cls(cull_sigma=config.CULL_SIGMA, min_transmittance=config.MIN_TRANSMITTANCE,
                   blur_variance=config.SPLAT_DILATION)

    @classmethod
    def exact(cls) -> 'RenderSettings':
        """No culling and no early termination"""
        return cls(cull_sigma=None, min_transmittance=0.0)


@dataclass
class RenderOutput:
    """rgb [H, W, 3], alpha [H, W], expected depth [H, W] (0 where alpha is 0)"""
    rgb: Tensor
    alpha: Tensor
    depth: Tensor

    @classmethod
    def empty(cls, height: int, width: int, dtype=torch.float64) -> 'RenderOutput':
        return cls(torch.zeros(height, width, 3, dtype=dtype), torch.zeros(height, width, dtype=dtype),
                   torch.zeros(height, width, dtype=dtype))

    def detach(self) -> 'RenderOutput':
        return RenderOutput(self.rgb.detach(), self.alpha.detach(), self.depth.detach())


def project_points(points: Tensor, pose: CameraPose) -> Tuple[Tensor, Tensor]:
    """Vectorized projection: pixels [..., 2] and validity [...]"""
    pixels, _, valid = project(pose, points)
    return pixels, valid


def screen_covariances(world: WorldGaussians, pose: CameraPose, cam_means: Tensor,
                       blur_variance: float) -> Tensor:
    """Sigma_2D = J R Sigma R^T J^T, floored by COVARIANCE_EPS plus the optional dilation, [N, 2, 2]"""
    R = pose.rotation_matrix()
    cov_cam = R @ world.covariances @ R.transpose(-1, -2)
    J = camera_jacobian(pose, cam_means)
    cov2d = J @ cov_cam @ J.transpose(-1, -2)
    eye = torch.eye(2, dtype=cov2d.dtype)
    return cov2d + (COVARIANCE_EPS + blur_variance) * eye


def _pixel_pairs(mean2d: Tensor, cov2d: Tensor, width: int, height: int,
                 cull_sigma: Optional[float]) -> Tuple[Tensor, Tensor, Tensor]:
    """Enumerate (gaussian, x, y) inside each splat's screen-space bounding box"""
    n = mean2d.shape[0]
    if cull_sigma is None:
        x0 = torch.zeros(n, dtype=torch.long)
        y0 = torch.zeros(n, dtype=torch.long)
        bw = torch.full((n,), width, dtype=torch.long)
        bh = torch.full((n,), height, dtype=torch.long)
    else:
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        mid = 0.5 * (a + c)
        lambda_max = mid + torch.sqrt((mid * mid - (a * c - b * b)).clamp_min(0.0))
        radius = cull_sigma * torch.sqrt(lambda_max)
        u, v = mean2d[:, 0], mean2d[:, 1]
        x0 = torch.ceil(u - radius).clamp(0, width).long()
        x1 = torch.floor(u + radius).clamp(-1, width - 1).long()
        y0 = torch.ceil(v - radius).clamp(0, height).long()
        y1 = torch.floor(v + radius).clamp(-1, height - 1).long()
        bw = (x1 - x0 + 1).clamp_min(0)
        bh = (y1 - y0 + 1).clamp_min(0)

    counts = bw * bh
    gauss = torch.repeat_interleave(torch.arange(n), counts)
    starts = torch.cumsum(counts, 0) - counts
    local = torch.arange(gauss.shape[0]) - starts[gauss]
    px = x0[gauss] + local % bw[gauss]
    py = y0[gauss] + torch.div(local, bw[gauss], rounding_mode='floor')
    return gauss, px, py


def render(world: WorldGaussians, pose: CameraPose,
           settings: Optional[RenderSettings] = None) -> RenderOutput:
    """
    Render world Gaussians from `pose`

    Gaussians are ordered by mean camera depth (ties by input order); each
    pixel composites its splats front to back with weight
    opacity * exp(-1/2 d^T Sigma_2D^-1 d). Black background.
    """
    settings = settings or RenderSettings()
    k = pose.intrinsics
    dtype = world.means.dtype
    if len(world) == 0:
        return RenderOutput.empty(k.height, k.width, dtype)

    cam_means = pose.world_to_camera(world.means)
    _, depth, in_front = project(pose, world.means)
    keep = torch.nonzero(in_front & world.active).flatten()
    if keep.numel() == 0:
        return RenderOutput.empty(k.height, k.width, dtype)

    cam_means = cam_means[keep]
    depth = depth[keep]
    sub = WorldGaussians(world.means[keep], world.covariances[keep], world.colors[keep],
                         world.opacities[keep], world.active[keep])
    mean2d = torch.stack([k.cx + k.focal * cam_means[:, 0] / depth,
                          k.cy + k.focal * cam_means[:, 1] / depth], dim=-1)
    cov2d = screen_covariances(sub, pose, cam_means, settings.blur_variance)

    with torch.no_grad():
        gauss, px, py = _pixel_pairs(mean2d.detach(), cov2d.detach(), k.width, k.height, settings.cull_sigma)

    if gauss.numel() == 0:
        return RenderOutput.empty(k.height, k.width, dtype)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)

    dx = px.to(dtype) - mean2d[gauss, 0]
    dy = py.to(dtype) - mean2d[gauss, 1]
    cg = conic[gauss]
    mahalanobis = cg[:, 0] * dx * dx + 2.0 * cg[:, 1] * dx * dy + cg[:, 2] * dy * dy

    if settings.cull_sigma is not None:
        inside = torch.nonzero(mahalanobis.detach() <= settings.cull_sigma ** 2).flatten()
        gauss, px, py, mahalanobis = gauss[inside], px[inside], py[inside], mahalanobis[inside]

    weight = (sub.opacities[gauss] * torch.exp(-0.5 * mahalanobis)).clamp(max=settings.max_splat_alpha)

    with torch.no_grad():
        rank = torch.empty_like(keep)
        rank[torch.argsort(depth.detach(), stable=True)] = torch.arange(keep.numel())
        pixel = py * k.width + px
        order = torch.argsort(pixel * keep.numel() + rank[gauss])
        pixel = pixel[order]
        is_start = torch.ones_like(pixel, dtype=torch.bool)
        is_start[1:] = pixel[1:] != pixel[:-1]
        positions = torch.arange(pixel.numel())
        segment_start = torch.cummax(torch.where(is_start, positions, torch.zeros_like(positions)), 0).values

    gauss = gauss[order]
    weight = weight[order]

    # transmittance before each splat: segmented exclusive product of (1 - w)
    log_keep = torch.log1p(-weight)
    exclusive = torch.cumsum(log_keep, 0) - log_keep
    transmittance = torch.exp(exclusive - exclusive[segment_start])
    if settings.min_transmittance > 0:
        transmittance = torch.where(transmittance.detach() >= settings.min_transmittance,
                                    transmittance, torch.zeros_like(transmittance))
    contribution = weight * transmittance

    num_pixels = k.height * k.width
    alpha = torch.zeros(num_pixels, dtype=dtype).index_add(0, pixel, contribution)
    rgb = torch.zeros(num_pixels, 3, dtype=dtype).index_add(0, pixel, contribution[:, None] * sub.colors[gauss])
    depth_sum = torch.zeros(num_pixels, dtype=dtype).index_add(0, pixel, contribution * depth[gauss])
    covered = alpha > ALPHA_EPS
    expected_depth = torch.where(covered, depth_sum / torch.where(covered, alpha, torch.ones_like(alpha)),
                                 torch.zeros_like(alpha))

    logger.debug(f"Rendered {keep.numel()} Gaussians over {pixel.numel()} splat-pixel pairs")
    return RenderOutput(rgb.reshape(k.height, k.width, 3), alpha.reshape(k.height, k.width),
                        expected_depth.reshape(k.height, k.width))


def render_backward(world: WorldGaussians, pose: CameraPose, grad_rgb: Tensor,
                    grad_alpha: Optional[Tensor] = None, grad_depth: Optional[Tensor] = None,
                    settings: Optional[RenderSettings] = None) -> Dict[str, Tensor]:
    """
    Gradients of <upstream, render> for every Gaussian parameter and the pose

    Returns a dict with means, covariances, colors, opacities, rotation and
    translation; unused inputs get zero gradients.
    """
    inputs = {
        'means': world.means.detach().clone().requires_grad_(True),
        'covariances': world.covariances.detach().clone().requires_grad_(True),
        'colors': world.colors.detach().clone().requires_grad_(True),
        'opacities': world.opacities.detach().clone().requires_grad_(True),
        'rotation': pose.rotation.detach().clone().requires_grad_(True),
        'translation': pose.translation.detach().clone().requires_grad_(True),
    }
    leaf_world = WorldGaussians(inputs['means'], inputs['covariances'], inputs['colors'],
                                inputs['opacities'], world.active)
    leaf_pose = CameraPose(inputs['rotation'], inputs['translation'], pose.intrinsics)

    with torch.enable_grad():
        out = render(leaf_world, leaf_pose, settings)
        objective = (out.rgb * grad_rgb).sum()
        if grad_alpha is not None:
            objective = objective + (out.alpha * grad_alpha).sum()
        if grad_depth is not None:
            objective = objective + (out.depth * grad_depth).sum()

        if not objective.requires_grad:
            return {name: torch.zeros_like(value) for name, value in inputs.items()}
        grads = torch.autograd.grad(objective, list(inputs.values()), allow_unused=True)

    return {name: torch.zeros_like(value) if grad is None else grad
            for (name, value), grad in zip(inputs.items(), grads)}


def to_uint8(image: Tensor) -> np.ndarray:
    return np.clip(np.round(image.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)


def save_render_png(output: RenderOutput, rgb_path: str, alpha_path: Optional[str] = None):
    """PNG export of the rgb image and, optionally, the alpha mask"""
    os.makedirs(os.path.dirname(os.path.abspath(rgb_path)), exist_ok=True)
    Image.fromarray(to_uint8(output.rgb)).save(rgb_path)
    if alpha_path:
        Image.fromarray(to_uint8(output.alpha)).save(alpha_path)
