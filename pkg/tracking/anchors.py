#!/usr/bin/env python3
"""
Anchor lifting and association
Lift 2D track starts onto the mesh by ray casting, map them to the canonical
surface and bind each to its nearest canonical Gaussian.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors
from torch import Tensor

from geometry.camera import CameraPose
from geometry.mesh import TriMesh, barycentric_to_world, ray_mesh_intersect_batch
from tracking.chunk_schedule import ChunkSpec
from tracking.track_set import TrackSet

logger = logging.getLogger(__name__)

MISS_WARNING_FRACTION = 0.5


@dataclass
class AnchorAssociation:
    """Track point ids, their lifted canonical points and associated Gaussian ids"""
    chunk: ChunkSpec
    track_ids: Tensor
    gaussian_ids: Tensor
    canonical_points: Tensor
    distances: Tensor

    def __len__(self) -> int:
        return int(self.track_ids.shape[0])


def lift_and_associate(tracks: TrackSet, chunk: ChunkSpec, deformed: TriMesh, canonical: TriMesh,
                       pose: CameraPose, gaussian_centers: Tensor, radius: float) -> AnchorAssociation:
    """
    Associate tracks visible at the chunk start with canonical Gaussians

    `deformed` is the current mesh estimate at the start frame and `pose` the
    current camera there. Misses and lifts farther than `radius` from any
    Gaussian centre are dropped.
    """
    start = tracks.start
    visible_ids = torch.nonzero(tracks.visibility[:, start]).flatten()
    empty = AnchorAssociation(chunk, torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
                              torch.zeros(0, 3, dtype=canonical.vertices.dtype),
                              torch.zeros(0, dtype=canonical.vertices.dtype))
    if visible_ids.numel() == 0:
        return empty

    with torch.no_grad():
        hits = ray_mesh_intersect_batch(deformed, pose, tracks.positions[visible_ids, start])
        misses = int((~hits.hit).sum())
        if misses > MISS_WARNING_FRACTION * visible_ids.numel():
            logger.warning(f"{misses}/{visible_ids.numel()} track starts of {chunk.name} missed the mesh; "
                           f"the pose at frame {start} is likely off")

        hit_ids = visible_ids[hits.hit]
        if hit_ids.numel() == 0:
            return empty
        points = barycentric_to_world(canonical.vertices.detach(), canonical.faces,
                                      hits.face[hits.hit], hits.bary[hits.hit])

        centers = gaussian_centers.detach().cpu().numpy().astype(np.float64)
        distances, nearest = NearestNeighbors(n_neighbors=1).fit(centers).kneighbors(
            points.cpu().numpy().astype(np.float64))
        distances = torch.from_numpy(distances[:, 0]).to(points.dtype)
        nearest = torch.from_numpy(nearest[:, 0].astype(np.int64))

        close = distances <= radius
        dropped = int((~close).sum())
        if dropped:
            logger.debug(f"{chunk.name}: dropped {dropped} lifts beyond association radius {radius:.4f}")

    return AnchorAssociation(chunk, hit_ids[close], nearest[close], points[close], distances[close])
