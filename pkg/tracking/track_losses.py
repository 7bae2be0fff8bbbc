#!/usr/bin/env python3
"""
Track supervision losses
L1 reprojection loss along tracks and masked L2 loss on pairwise flow,
both normalized by the number of visible terms.
"""

import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from geometry.camera import CameraPose, project
from tracking.anchors import AnchorAssociation
from tracking.chunk_schedule import ChunkSchedule, ChunkSpec, select_chunk
from tracking.track_set import TrackSet

logger = logging.getLogger(__name__)

CentersFn = Callable[[int], Tensor]
PoseFn = Callable[[int], CameraPose]


class ProjectionCache:
    """Projected Gaussian centres per frame, computed once per loss evaluation"""

    def __init__(self, centers: CentersFn, pose: PoseFn):
        self.centers = centers
        self.pose = pose
        self._cache: Dict[int, Tuple[Tensor, Tensor]] = {}

    def __call__(self, frame: int) -> Tuple[Tensor, Tensor]:
        if frame not in self._cache:
            pixels, _, valid = project(self.pose(frame), self.centers(frame))
            self._cache[frame] = (pixels, valid)
        return self._cache[frame]


def track_loss(association: AnchorAssociation, tracks: TrackSet, centers: CentersFn, pose: PoseFn,
               frames: Optional[Iterable[int]] = None,
               projections: Optional[ProjectionCache] = None) -> Tensor:
    """
    Mean over visible (point, frame) terms of |dx| + |dy|

    centers(frame) gives the deformed Gaussian centres, pose(frame) the
    camera. Behind-camera projections are excluded.
    """
    projections = projections or ProjectionCache(centers, pose)
    frames = range(tracks.num_frames) if frames is None else frames
    if len(association) == 0:
        return torch.zeros((), dtype=tracks.positions.dtype)

    total, count = None, 0
    for frame in frames:
        visible = tracks.visibility[association.track_ids, frame]
        if not bool(visible.any()):
            continue
        pixels, valid = projections(frame)
        predicted = pixels[association.gaussian_ids]
        mask = visible & valid[association.gaussian_ids]
        if not bool(mask.any()):
            continue
        observed = tracks.positions[association.track_ids, frame].to(predicted.dtype)
        term = (predicted[mask] - observed[mask]).abs().sum()
        total = term if total is None else total + term
        count += int(mask.sum())

    if total is None:
        return torch.zeros((), dtype=tracks.positions.dtype)
    return total / count


def sample_frame_pairs(rng: np.random.Generator, num_frames: int, count: int) -> List[Tuple[int, int]]:
    """`count` pairs drawn uniformly from {(i, j): i < j}"""
    if num_frames < 2:
        return []
    i, j = np.triu_indices(num_frames, k=1)
    picks = rng.integers(0, len(i), size=count)
    return [(int(i[p]), int(j[p])) for p in picks]


def multi_track_loss(associations: Mapping[ChunkSpec, AnchorAssociation], tracksets: Mapping[ChunkSpec, TrackSet],
                     schedule: ChunkSchedule, centers: CentersFn, pose: PoseFn,
                     pairs: Sequence[Tuple[int, int]],
                     projections: Optional[ProjectionCache] = None) -> Tensor:
    """
    Masked squared L2 between predicted and tracked flow F_{i->j}

    Each pair uses the chunk picked by select_chunk; normalized by the number
    of (point, pair) terms visible in both frames.
    """
    projections = projections or ProjectionCache(centers, pose)
    total, count = None, 0
    dtype = torch.float64

    for i, j in pairs:
        if i == j:
            continue
        lo, hi = min(i, j), max(i, j)
        chunk = select_chunk(schedule, tracksets, lo, hi)
        association = associations.get(chunk)
        if association is None or len(association) == 0:
            continue
        tracks = tracksets[chunk]
        dtype = tracks.positions.dtype
        both = tracks.visibility[association.track_ids, i] & tracks.visibility[association.track_ids, j]
        if not bool(both.any()):
            continue

        pix_i, valid_i = projections(i)
        pix_j, valid_j = projections(j)
        gids = association.gaussian_ids
        mask = both & valid_i[gids] & valid_j[gids]
        if not bool(mask.any()):
            continue

        predicted = (pix_j[gids] - pix_i[gids])[mask]
        observed = tracks.flow(i, j)[association.track_ids][mask].to(predicted.dtype)
        term = ((predicted - observed) ** 2).sum()
        total = term if total is None else total + term
        count += int(mask.sum())

    if total is None:
        return torch.zeros((), dtype=dtype)
    return total / count
