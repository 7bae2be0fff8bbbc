#!/usr/bin/env python3
"""
Personalized pose regressor
A small convolutional encoder with an MLP head, trained on renders of the
static model from random poses and used to initialize per-frame poses.
"""

import logging
import math
import os
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from exceptions import DivergenceError
from gaussians.splat_renderer import RenderSettings, render
from gaussians.surface_gaussians import WorldGaussians
from geometry.camera import CameraPose, Intrinsics
from geometry.quaternion import (geodesic_rotation_distance, quat_canonicalize, quat_normalize,
                                 quat_to_matrix)
from optimization.adam import GuardedOptimizer
from pose.augment import AugmentSettings, augment, rotate_pose_label
from pose.pose_sampler import PoseSample, sample_pose

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ENCODER_CHANNELS = (16, 32, 64, 128, 128)
HEAD_HIDDEN = 256


def conv_block(in_planes: int, out_planes: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=2, padding=1, bias=True),
        nn.LeakyReLU(0.1))


@dataclass
class PosePrediction:
    """Unit quaternions (w >= 0) [B, 4], translations [B, 3], uncertainties [B]"""
    quaternion: Tensor
    translation: Tensor
    sigma: Tensor

    def rotation_matrix(self) -> Tensor:
        return quat_to_matrix(self.quaternion)


@dataclass
class PoseLoss:
    total: Tensor
    rotation: Tensor
    translation: Tensor
    uncertainty: Tensor

    def as_dict(self) -> Dict[str, float]:
        return {'total': float(self.total), 'rotation': float(self.rotation),
                'translation': float(self.translation), 'uncertainty': float(self.uncertainty)}


class PoseRegressor(nn.Module):
    """
    Image encoder + MLP head emitting quaternion (4), translation (3), sigma (1)

    `forward(features=...)` skips the encoder so precomputed features from an
    external backbone can be used instead of images.
    """

    def __init__(self, feature_dim: int = 128, input_size: int = 64,
                 translation_prior: Sequence[float] = (0.0, 0.0, 4.0)):
        super().__init__()
        self.feature_dim = feature_dim
        self.input_size = input_size
        blocks, channels = [], 3
        for out in ENCODER_CHANNELS[:-1] + (feature_dim,):
            blocks.append(conv_block(channels, out))
            channels = out
        self.encoder = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Sequential(
            nn.Linear(feature_dim, HEAD_HIDDEN), nn.LeakyReLU(0.1),
            nn.Linear(HEAD_HIDDEN, 8))
        self.register_buffer('translation_prior', torch.tensor(translation_prior, dtype=torch.float32))
        self.float()

    def preprocess(self, images: Tensor) -> Tensor:
        """[B, H, W, 3] or [B, 3, H, W] in [0, 1] to [B, 3, S, S] float32"""
        if images.shape[-1] == 3 and images.shape[1] != 3:
            images = images.permute(0, 3, 1, 2)
        images = images.float()
        if images.shape[-2:] != (self.input_size, self.input_size):
            images = F.interpolate(images, size=(self.input_size, self.input_size), mode='bilinear',
                                   align_corners=False, antialias=True)
        return images

    def encode(self, images: Tensor) -> Tensor:
        return self.encoder(self.preprocess(images))

    def forward(self, images: Optional[Tensor] = None, features: Optional[Tensor] = None) -> PosePrediction:
        if features is None:
            if images is None:
                raise ValueError("PoseRegressor needs images or features")
            features = self.encode(images)
        out = self.head(features.float())
        quaternion = quat_canonicalize(quat_normalize(out[:, :4] + out.new_tensor([1.0, 0.0, 0.0, 0.0])))
        translation = self.translation_prior + out[:, 4:7]
        sigma = F.softplus(out[:, 7])
        return PosePrediction(quaternion, translation, sigma)


def pose_loss(pred: PosePrediction, rotations: Tensor, translations: Tensor,
              lambda_rot: float = 1.0, lambda_trans: float = 1.0, lambda_unc: float = 0.1) -> PoseLoss:
    """
    lambda_rot L_rot + lambda_trans L_trans + lambda_unc L_unc, batch means

    L_rot is the geodesic angle, L_trans the squared translation error and
    L_unc = (sigma - (L_rot + L_trans))^2 with the target held constant.
    """
    R_hat = pred.rotation_matrix()
    l_rot = geodesic_rotation_distance(rotations.to(R_hat.dtype), R_hat)
    l_trans = ((translations.to(pred.translation.dtype) - pred.translation) ** 2).sum(dim=-1)
    target = (l_rot + l_trans).detach()
    l_unc = (pred.sigma - target) ** 2

    rot, trans, unc = l_rot.mean(), l_trans.mean(), l_unc.mean()
    total = lambda_rot * rot + lambda_trans * trans + lambda_unc * unc
    return PoseLoss(total, rot, trans, unc)


class RenderProducer:
    """Background thread filling a bounded queue with training batches"""

    def __init__(self, make_batch: Callable[[], tuple], count: int, maxsize: int):
        self.queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(make_batch, count), daemon=True)
        self._thread.start()

    def _run(self, make_batch, count):
        for _ in range(count):
            if self._stop.is_set():
                return
            try:
                item = make_batch()
            except Exception as e:
                item = e
            while not self._stop.is_set():
                try:
                    self.queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if isinstance(item, Exception):
                return

    def get(self) -> tuple:
        item = self.queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5.0)


class PoseBatchMaker:
    """Renders (image, R, t) batches of the static model from sampled poses"""

    def __init__(self, world: WorldGaussians, intrinsics: Intrinsics, config, rng: np.random.Generator,
                 pose_source: Optional[Callable[[np.random.Generator], CameraPose]] = None,
                 centroid: Sequence[float] = (0.0, 0.0, 0.0)):
        self.world = WorldGaussians(world.means.detach(), world.covariances.detach(), world.colors.detach(),
                                    world.opacities.detach(), world.active)
        self.intrinsics = intrinsics
        self.config = config
        self.rng = rng
        self.pose_source = pose_source
        self.centroid = centroid
        self.render_settings = RenderSettings.from_config(config)
        self.augment_settings = AugmentSettings.from_config(config)

    def sample(self) -> PoseSample:
        if self.pose_source is not None:
            pose = self.pose_source(self.rng)
        else:
            pose = sample_pose(self.rng, self.config, self.intrinsics, self.centroid,
                               dtype=self.world.means.dtype)
        with torch.no_grad():
            image = render(self.world, pose, self.render_settings).rgb
        result = augment(image, self.rng, self.augment_settings, (self.intrinsics.cx, self.intrinsics.cy))
        if result.rotation:
            pose = rotate_pose_label(pose, result.rotation)
        return PoseSample(result.image, pose)

    def __call__(self, batch_size: Optional[int] = None) -> Tuple[Tensor, Tensor, Tensor]:
        images, rotations, translations = [], [], []
        for _ in range(batch_size or self.config.POSE_BATCH_SIZE):
            sample = self.sample()
            images.append(sample.image.float())
            rotations.append(sample.pose.rotation_matrix().float())
            translations.append(sample.pose.translation.float())
        return torch.stack(images), torch.stack(rotations), torch.stack(translations)


def train_pose_regressor(world: WorldGaussians, intrinsics: Intrinsics, config, seed: Optional[int] = None,
                         pose_source: Optional[Callable[[np.random.Generator], CameraPose]] = None,
                         centroid: Sequence[float] = (0.0, 0.0, 0.0)) -> Tuple[PoseRegressor, pd.DataFrame]:
    """
    Train on renders generated on the fly

    `intrinsics` should already be scaled to POSE_INPUT_SIZE. Returns the
    regressor and a per-step loss history. Raises DivergenceError on a
    non-finite loss.
    """
    seed = config.SEED if seed is None else seed
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    radius = 0.5 * (config.POSE_RADIUS_MIN + config.POSE_RADIUS_MAX)
    regressor = PoseRegressor(config.POSE_FEATURE_DIM, config.POSE_INPUT_SIZE, (0.0, 0.0, radius))
    optimizer = GuardedOptimizer(regressor.parameters(), kind='adam', lr=config.POSE_LR, betas=config.POSE_BETAS)

    make_batch = PoseBatchMaker(world, intrinsics, config, rng, pose_source, centroid)
    iterations = int(config.POSE_ITERATIONS)
    producer = RenderProducer(make_batch, iterations, config.POSE_PREFETCH) if config.POSE_PREFETCH > 0 else None

    logger.info(f"Training pose regressor: {iterations} iterations, batch {config.POSE_BATCH_SIZE}, "
                f"lr {config.POSE_LR}")
    history: List[Dict[str, float]] = []
    regressor.train()
    try:
        for step in range(iterations):
            images, rotations, translations = producer.get() if producer else make_batch()
            losses = pose_loss(regressor(images), rotations, translations,
                               config.POSE_LAMBDA_ROT, config.POSE_LAMBDA_TRANS, config.POSE_LAMBDA_UNC)
            if not torch.isfinite(losses.total):
                raise DivergenceError(f"Pose regressor loss became non-finite at step {step}", step)

            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()

            history.append({'step': step, **losses.as_dict()})
            if step % config.POSE_LOG_EVERY == 0 or step == iterations - 1:
                logger.info(f"[pose {step:5d}] total={losses.total.item():.4f} "
                            f"rot={math.degrees(losses.rotation.item()):.2f}deg "
                            f"trans={losses.translation.item():.4f}")
    finally:
        if producer:
            producer.close()

    regressor.eval()
    return regressor, pd.DataFrame(history, columns=['step', 'total', 'rotation', 'translation', 'uncertainty'])


@torch.no_grad()
def evaluate_pose_regressor(regressor: PoseRegressor, world: WorldGaussians, intrinsics: Intrinsics, config,
                            samples: Optional[int] = None, seed: int = 12345,
                            centroid: Sequence[float] = (0.0, 0.0, 0.0)) -> Dict[str, float]:
    """Geodesic and translation errors on held-out, unaugmented renders"""
    heldout = config.copy(AUGMENT=False)
    make_batch = PoseBatchMaker(world, intrinsics, heldout, np.random.default_rng(seed), centroid=centroid)
    images, rotations, translations = make_batch(samples or config.POSE_HELDOUT_SAMPLES)
    pred = regressor(images)
    angles = torch.rad2deg(geodesic_rotation_distance(rotations, pred.rotation_matrix()))
    trans = (translations - pred.translation).norm(dim=-1)
    report = {
        'samples': int(images.shape[0]),
        'rotation_error_median_deg': float(angles.median()),
        'rotation_error_mean_deg': float(angles.mean()),
        'translation_error_mean': float(trans.mean()),
    }
    logger.info(f"Pose regressor held-out: median {report['rotation_error_median_deg']:.2f}deg, "
                f"mean translation error {report['translation_error_mean']:.4f}")
    return report


@torch.no_grad()
def initialize_video_poses(regressor: PoseRegressor, frames: Tensor,
                           intrinsics: Intrinsics) -> Tuple[List[CameraPose], List[float]]:
    """
    One pose and sigma per frame

    `frames` are masked object crops on black [K, H, W, 3]; returned poses
    carry the sequence intrinsics.
    """
    regressor.eval()
    pred = regressor(frames)
    poses = [CameraPose(pred.quaternion[k].double(), pred.translation[k].double(), intrinsics)
             for k in range(frames.shape[0])]
    sigmas = [float(s) for s in pred.sigma]
    logger.info(f"Initialized {len(poses)} frame poses (mean sigma {np.mean(sigmas):.4f})")
    return poses, sigmas


def save_regressor(regressor: PoseRegressor, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        'format_version': CHECKPOINT_VERSION,
        'state_dict': regressor.state_dict(),
        'feature_dim': regressor.feature_dim,
        'input_size': regressor.input_size,
        'translation_prior': regressor.translation_prior.tolist(),
    }, path)
    return path


def load_regressor(path: str) -> PoseRegressor:
    checkpoint = torch.load(path, map_location='cpu')
    if checkpoint.get('format_version') != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported regressor checkpoint version {checkpoint.get('format_version')}")
    regressor = PoseRegressor(checkpoint['feature_dim'], checkpoint['input_size'], checkpoint['translation_prior'])
    regressor.load_state_dict(checkpoint['state_dict'])
    regressor.eval()
    return regressor


def write_pose_jsonl(path: str, poses: Sequence[CameraPose], sigmas: Optional[Sequence[float]] = None) -> str:
    """One {frame, quaternion, translation, sigma} record per line"""
    records = []
    for frame, pose in enumerate(poses):
        data = pose.to_dict()
        records.append({'frame': frame, 'quaternion': data['quaternion'], 'translation': data['translation'],
                        'sigma': float(sigmas[frame]) if sigmas is not None else 0.0})
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(records, columns=['frame', 'quaternion', 'translation', 'sigma']).to_json(
        path, orient='records', lines=True, double_precision=15)
    return path


def read_pose_jsonl(path: str, intrinsics: Intrinsics) -> Tuple[List[CameraPose], List[float]]:
    df = pd.read_json(path, orient='records', lines=True).sort_values('frame')
    poses = [CameraPose(torch.tensor(list(q), dtype=torch.float64), torch.tensor(list(t), dtype=torch.float64),
                        intrinsics) for q, t in zip(df['quaternion'], df['translation'])]
    return poses, [float(s) for s in df['sigma']]
