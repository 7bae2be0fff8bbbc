#!/usr/bin/env python3
"""
Static appearance fit
Photometric fit of Gaussian colours, tangential scales and opacities on the
keyframe, with the canonical mesh held fixed.
"""

import logging
from typing import Dict, List

import pandas as pd
import torch
from torch import Tensor

from exceptions import DivergenceError
from gaussians.splat_renderer import RenderSettings, render
from gaussians.surface_gaussians import SurfaceGaussianSet, realize
from geometry.camera import CameraPose
from geometry.mesh import TriMesh
from optimization.adam import GuardedOptimizer
from optimization.losses import rgb_loss

logger = logging.getLogger(__name__)


def fit_static(gaussians: SurfaceGaussianSet, mesh: TriMesh, image: Tensor, mask: Tensor, pose: CameraPose,
               config) -> pd.DataFrame:
    """Adam on the appearance parameters for STATIC_FIT_ITERATIONS steps; returns the loss history"""
    optimizer = GuardedOptimizer(gaussians.appearance_parameters(), kind='adam', lr=config.STATIC_FIT_LR,
                                 betas=config.POSE_BETAS)
    settings = RenderSettings.from_config(config)
    pose = pose.detach()
    history: List[Dict[str, float]] = []

    for step in range(int(config.STATIC_FIT_ITERATIONS)):
        loss = rgb_loss(render(realize(gaussians, mesh), pose, settings), image, mask)
        if not torch.isfinite(loss):
            raise DivergenceError(f"Static fit loss became non-finite at step {step}", step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append({'step': step, 'rgb': float(loss)})

    if history:
        logger.info(f"Static fit: rgb {history[0]['rgb']:.5f} -> {history[-1]['rgb']:.5f} "
                    f"over {len(history)} steps")
    return pd.DataFrame(history, columns=['step', 'rgb'])
