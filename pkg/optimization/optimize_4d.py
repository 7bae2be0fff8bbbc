#!/usr/bin/env python3
"""
Joint 4D optimization
Updates the deformation timeline and the per-frame delta poses against the
photometric, track, multi-track, ARAP and smoothness terms.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from torch import Tensor

from deformation.timeline import save_timeline
from exceptions import DivergenceError
from optimization.adam import GuardedOptimizer
from optimization.losses import LossWeights, arap_loss, rgb_loss
from optimization.scene_model import SceneModel
from tracking.anchors import AnchorAssociation, lift_and_associate
from tracking.chunk_schedule import ChunkSchedule, ChunkSpec
from tracking.track_losses import ProjectionCache, multi_track_loss, sample_frame_pairs, track_loss
from tracking.track_set import TrackSet

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['step', 'rgb', 'track', 'multi', 'arap', 'smooth', 'total']


@dataclass
class OptimizeResult:
    timeline: torch.nn.Module
    delta_poses: torch.nn.Module
    history: pd.DataFrame
    skipped_groups: int = 0
    warnings: List[str] = field(default_factory=list)


def sample_frames(rng: np.random.Generator, num_frames: int, keyframe: int, count: int,
                  keyframe_probability: float) -> List[int]:
    """`count` distinct frames; the keyframe is swapped in with the given probability"""
    count = min(count, num_frames)
    frames = [int(f) for f in rng.choice(num_frames, size=count, replace=False)]
    if rng.random() < keyframe_probability and keyframe not in frames:
        frames[0] = keyframe
    return sorted(frames)


def associate_all(model: SceneModel, tracksets: Mapping[ChunkSpec, TrackSet],
                  radius: float) -> Dict[ChunkSpec, AnchorAssociation]:
    """Lift every chunk at its start frame with the current estimates"""
    associations = {}
    with torch.no_grad():
        centers = model.canonical_centers()
        for chunk, tracks in tracksets.items():
            deformed = model.canonical.with_vertices(model.deformed_vertices(chunk.start).detach())
            associations[chunk] = lift_and_associate(tracks, chunk, deformed, model.canonical,
                                                     model.pose(chunk.start).detach(), centers, radius)
    model.clear_cache()
    total = sum(len(a) for a in associations.values())
    logger.debug(f"Associated {total} track points across {len(associations)} chunks")
    return associations


def compute_losses(model: SceneModel, frames: List[int], images: Tensor, masks: Tensor,
                   associations: Mapping[ChunkSpec, AnchorAssociation], tracksets: Mapping[ChunkSpec, TrackSet],
                   schedule: Optional[ChunkSchedule], pairs: List[Tuple[int, int]],
                   weights: LossWeights) -> Dict[str, Tensor]:
    """Each loss component, evaluated independently"""
    projections = ProjectionCache(model.gaussian_centers, model.pose)
    components: Dict[str, Tensor] = {}

    if weights.rgb > 0:
        terms = [rgb_loss(model.render(f), images[f], masks[f]) for f in frames]
        components['rgb'] = torch.stack(terms).mean()

    if weights.track > 0:
        keyframe_chunks = [c for c in associations if c.direction == 'keyframe'] or list(associations)
        terms = [track_loss(associations[c], tracksets[c], model.gaussian_centers, model.pose, frames, projections)
                 for c in keyframe_chunks]
        components['track'] = torch.stack(terms).mean() if terms else torch.zeros((), dtype=torch.float64)

    if weights.multi > 0 and schedule is not None:
        chunk_sets = {c: t for c, t in tracksets.items() if c.direction != 'keyframe'}
        components['multi'] = multi_track_loss(associations, chunk_sets, schedule, model.gaussian_centers,
                                               model.pose, pairs, projections)

    if weights.arap > 0:
        terms = [arap_loss(model.canonical, model.deformed_vertices(f)) for f in frames]
        components['arap'] = torch.stack(terms).mean()

    if weights.smooth > 0:
        components['smooth'] = model.timeline.smoothness_loss()

    return components


def save_checkpoint(model: SceneModel, directory: str, suffix: str = '') -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"timeline{suffix}.bin")
    save_timeline(model.timeline, path)
    torch.save(model.delta_poses.state_dict(), os.path.join(directory, f"delta_poses{suffix}.pt"))
    return path


def _trailing_windows_decrease(totals: List[float], window: int) -> bool:
    if window <= 0 or len(totals) < 2 * window:
        return True
    means = [np.mean(totals[i:i + window]) for i in range(len(totals) - window * (len(totals) // window),
                                                           len(totals), window)]
    return all(b <= a for a, b in zip(means, means[1:]))


def optimize_4d(model: SceneModel, images: Tensor, masks: Tensor, tracksets: Mapping[ChunkSpec, TrackSet],
                schedule: Optional[ChunkSchedule], config, checkpoint_dir: Optional[str] = None,
                seed: Optional[int] = None) -> OptimizeResult:
    """
    Stage-2 training loop

    Each step samples FRAMES_PER_STEP frames (keyframe swapped in with
    KEYFRAME_PROBABILITY) and PAIRS_PER_STEP frame pairs. Associations are
    refreshed every ASSOCIATION_REFRESH steps. A non-finite loss saves the
    last good state under `checkpoint_dir` and raises DivergenceError.
    """
    seed = config.SEED if seed is None else seed
    rng = np.random.default_rng(seed)
    weights = LossWeights.from_config(config)
    refine_poses = not config.ABLATION_NO_POSE_REFINE

    groups = [{'params': [p for p in model.timeline.parameters()], 'lr': config.DEFORM_LR, 'name': 'deformation'}]
    if refine_poses:
        groups.append({'params': [p for p in model.delta_poses.parameters()], 'lr': config.DELTA_POSE_LR,
                       'name': 'delta_pose'})
    else:
        model.delta_poses.requires_grad_(False)
    appearance_frozen = [p for p in model.gaussians.parameters() if p.requires_grad]
    model.gaussians.requires_grad_(False)
    optimizer = GuardedOptimizer(groups, kind='adamw', lr=config.DEFORM_LR, betas=config.OPTIMIZE_BETAS,
                                 weight_decay=config.WEIGHT_DECAY)

    radius = config.ASSOCIATION_RADIUS_FACTOR * model.gaussians.mean_tangential_scale()
    iterations = int(config.OPTIMIZE_ITERATIONS)
    needs_tracks = (weights.track > 0 or weights.multi > 0) and len(tracksets) > 0
    associations: Dict[ChunkSpec, AnchorAssociation] = {}
    history: List[Dict[str, float]] = []
    last_good = copy.deepcopy(model.timeline.state_dict()), copy.deepcopy(model.delta_poses.state_dict())

    logger.info(f"4D optimization: {iterations} steps, weights {weights.as_dict()}, "
                f"pose refinement {'on' if refine_poses else 'off'}")

    for step in range(iterations):
        if needs_tracks and step % max(int(config.ASSOCIATION_REFRESH), 1) == 0:
            associations = associate_all(model, tracksets, radius)

        frames = sample_frames(rng, model.num_frames, model.keyframe, config.FRAMES_PER_STEP,
                               config.KEYFRAME_PROBABILITY)
        pairs = sample_frame_pairs(rng, model.num_frames, config.PAIRS_PER_STEP)

        model.clear_cache()
        components = compute_losses(model, frames, images, masks, associations if needs_tracks else {},
                                    tracksets, schedule, pairs, weights)
        total = weights.combine(components)
        if total is None:
            raise ValueError("All loss weights are zero")

        if not torch.isfinite(total):
            checkpoint = None
            if checkpoint_dir:
                model.timeline.load_state_dict(last_good[0])
                model.delta_poses.load_state_dict(last_good[1])
                checkpoint = save_checkpoint(model, checkpoint_dir, '_last_good')
            raise DivergenceError(f"4D loss became non-finite at step {step}", step, checkpoint)
        last_good = copy.deepcopy(model.timeline.state_dict()), copy.deepcopy(model.delta_poses.state_dict())

        optimizer.zero_grad()
        if total.requires_grad:
            total.backward()
            optimizer.step()
        model.timeline.renormalize_()
        model.clear_cache()

        record = {'step': step, **{name: float(components[name]) if name in components else 0.0
                                   for name in HISTORY_COLUMNS[1:-1]}, 'total': float(total)}
        history.append(record)
        if step % config.OPTIMIZE_LOG_EVERY == 0 or step == iterations - 1:
            logger.info(f"[4d {step:5d}] " + ' '.join(f"{k}={v:.5f}" for k, v in record.items() if k != 'step'))

    for p in appearance_frozen:
        p.requires_grad_(True)

    warnings = []
    totals = [r['total'] for r in history]
    if not _trailing_windows_decrease(totals, int(config.LOSS_WINDOW)):
        message = f"Loss did not decrease over trailing {config.LOSS_WINDOW}-step windows"
        logger.warning(message)
        warnings.append(message)
    if model.stats.dqs_fallbacks:
        logger.info(f"DQS fell back to LBS for {model.stats.dqs_fallbacks} vertex evaluations")

    return OptimizeResult(model.timeline, model.delta_poses, pd.DataFrame(history, columns=HISTORY_COLUMNS),
                          optimizer.skipped_groups, warnings)
