#!/usr/bin/env python3
"""
Scene model for the 4D stage
Bundles the canonical mesh, surface Gaussians, control nodes, deformation
timeline and camera poses; caches per-frame deformations within one step.
"""

import logging
from typing import Dict, List, Optional

import torch
from torch import Tensor, nn

from deformation.control_nodes import ControlNodeSet
from deformation.skinning import SkinningStats, deform_hybrid
from gaussians.splat_renderer import RenderOutput, RenderSettings, render
from gaussians.surface_gaussians import SurfaceGaussianSet, WorldGaussians, realize
from geometry.camera import CameraPose
from geometry.mesh import TriMesh

logger = logging.getLogger(__name__)


class SceneModel(nn.Module):
    """Everything needed to render and project any frame"""

    def __init__(self, canonical: TriMesh, gaussians: SurfaceGaussianSet, nodes: ControlNodeSet,
                 timeline: nn.Module, initial_poses: List[CameraPose], delta_poses: nn.Module,
                 render_settings: Optional[RenderSettings] = None):
        super().__init__()
        if len(initial_poses) != timeline.num_frames:
            raise ValueError(f"{len(initial_poses)} initial poses for {timeline.num_frames} frames")
        self.canonical = canonical
        self.gaussians = gaussians
        self.nodes = nodes
        self.timeline = timeline
        self.delta_poses = delta_poses
        self.initial_poses = [pose.detach() for pose in initial_poses]
        self.render_settings = render_settings or RenderSettings()
        self.stats = SkinningStats()
        self._vertices: Dict[int, Tensor] = {}

    @property
    def num_frames(self) -> int:
        return self.timeline.num_frames

    @property
    def keyframe(self) -> int:
        return self.timeline.keyframe

    def clear_cache(self):
        self._vertices.clear()

    def deformed_vertices(self, frame: int) -> Tensor:
        if frame not in self._vertices:
            self._vertices[frame] = deform_hybrid(self.nodes, self.timeline, frame, self.canonical, self.stats)
        return self._vertices[frame]

    def deformed_mesh(self, frame: int) -> TriMesh:
        return self.canonical.with_vertices(self.deformed_vertices(frame))

    def gaussian_centers(self, frame: int) -> Tensor:
        return self.gaussians.anchor_positions(self.deformed_mesh(frame))

    def canonical_centers(self) -> Tensor:
        return self.gaussians.anchor_positions(self.canonical)

    def world_gaussians(self, frame: int) -> WorldGaussians:
        return realize(self.gaussians, self.deformed_mesh(frame))

    def pose(self, frame: int) -> CameraPose:
        return self.delta_poses.compose(frame, self.initial_poses[frame])

    def render(self, frame: int, pose: Optional[CameraPose] = None) -> RenderOutput:
        return render(self.world_gaussians(frame), pose or self.pose(frame), self.render_settings)

    @torch.no_grad()
    def refined_poses(self) -> List[CameraPose]:
        return [self.pose(frame).detach().canonical() for frame in range(self.num_frames)]
