#!/usr/bin/env python3
"""
Oracle point tracks
Exact projections of Gaussian anchors through the ground-truth deformation,
with visibility from ray casting the ground-truth mesh.

A point is visible when the first mesh hit along its pixel ray lies within
VISIBILITY_TOLERANCE (object units) of the point depth. This takes the place
of a test against rendered ground-truth depth; the oracle depth maps come
from the same intersector, so both agree.
"""

import logging
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from geometry.camera import CameraPose, project
from geometry.mesh import TriMesh, ray_mesh_intersect_batch
from tracking.chunk_schedule import ChunkSpec
from tracking.track_set import TrackSet

logger = logging.getLogger(__name__)

VISIBILITY_TOLERANCE = 1e-3


def visible_points(mesh: TriMesh, pose: CameraPose, points: Tensor) -> Tensor:
    """Points in front of the camera, inside the image and not occluded by `mesh`"""
    pixels, depth, valid = project(pose, points)
    k = pose.intrinsics
    inside = valid & (pixels[:, 0] >= -0.5) & (pixels[:, 0] <= k.width - 0.5) \
        & (pixels[:, 1] >= -0.5) & (pixels[:, 1] <= k.height - 0.5)
    visible = torch.zeros_like(inside)
    candidates = torch.nonzero(inside).flatten()
    if candidates.numel():
        hits = ray_mesh_intersect_batch(mesh, pose, pixels[candidates].detach())
        visible[candidates] = hits.hit & ((hits.depth - depth[candidates]).abs() <= VISIBILITY_TOLERANCE)
    return visible


def oracle_tracks(scene, chunk: ChunkSpec, num_points: int, noise_px: float = 0.0,
                  seed: Optional[int] = None) -> TrackSet:
    """
    Track points sampled among the anchors visible in the chunk start frame

    `scene` provides canonical (TriMesh), vertices [K, V, 3], poses and
    gaussians. Noise is N(0, noise_px^2) on visible positions.
    """
    num_frames = int(scene.vertices.shape[0])
    rng = np.random.default_rng(seed)

    def mesh_at(frame: int) -> TriMesh:
        return scene.canonical.with_vertices(scene.vertices[frame])

    with torch.no_grad():
        start_anchors = scene.gaussians.anchor_positions(mesh_at(chunk.start))
        candidates = torch.nonzero(visible_points(mesh_at(chunk.start), scene.poses[chunk.start],
                                                  start_anchors)).flatten().numpy()
        if candidates.size == 0:
            logger.warning(f"Empty silhouette at frame {chunk.start}: no oracle tracks for {chunk.name}")
            return TrackSet.empty(num_frames, chunk.direction, chunk.start)

        chosen = np.sort(rng.choice(candidates, size=min(num_points, candidates.size), replace=False))
        ids = torch.from_numpy(chosen)
        positions = torch.zeros(len(chosen), num_frames, 2, dtype=scene.vertices.dtype)
        visibility = torch.zeros(len(chosen), num_frames, dtype=torch.bool)

        for frame in chunk.frames(num_frames):
            anchors = scene.gaussians.anchor_positions(mesh_at(frame))[ids]
            pixels, _, _ = project(scene.poses[frame], anchors)
            positions[:, frame] = pixels
            visibility[:, frame] = visible_points(mesh_at(frame), scene.poses[frame], anchors)

        if noise_px > 0:
            noise = torch.from_numpy(rng.normal(0.0, noise_px, size=positions.shape)).to(positions.dtype)
            positions = positions + noise * visibility[..., None]
        positions = positions * visibility[..., None]

    logger.debug(f"Oracle tracks {chunk.name}: {len(chosen)} points, "
                 f"{float(visibility.float().mean()):.2f} visible fraction")
    return TrackSet(positions, visibility, chunk.direction, chunk.start)

