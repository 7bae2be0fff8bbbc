#!/usr/bin/env python3
"""
Benchmark metrics
Pose errors modulo one global similarity, vertex error after rigid alignment
and PSNR on held-out orbit views.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from gaussians.splat_renderer import RenderSettings, render
from gaussians.surface_gaussians import SurfaceGaussianSet, realize
from geometry.camera import CameraPose
from geometry.mesh import TriMesh

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-9
MASK_THRESHOLD = 0.5


@dataclass
class RunOutputs:
    """What a reconstruction run hands to evaluation"""
    poses: List[CameraPose]
    vertices: Tensor
    gaussians: SurfaceGaussianSet
    canonical: TriMesh
    runtime_seconds: float = 0.0


@dataclass
class MetricsReport:
    pose_error_mean_deg: float
    pose_error_median_deg: float
    translation_error_mean: float
    vertex_error_mean: float
    vertex_error_relative: float
    psnr_mean: float
    psnr_per_frame: List[float] = field(default_factory=list)
    runtime_seconds: float = 0.0
    alignment: str = 'similarity'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricsReport':
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in data.items() if k in names})

    def save_json(self, path: str, extra: Optional[Dict[str, Any]] = None) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        data = self.to_dict()
        if extra:
            data.update(extra)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return path


def umeyama(source: np.ndarray, target: np.ndarray,
            with_scale: bool = True) -> Optional[Tuple[float, np.ndarray, np.ndarray]]:
    """
    Least-squares (s, R, t) with target ~ s R source + t

    Returns None when the source points span fewer than two dimensions.
    """
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    X, Y = source - mu_s, target - mu_t
    singular = np.linalg.svd(X, compute_uv=False)
    if singular.size < 2 or singular[1] <= RANK_TOLERANCE * max(singular[0], 1.0):
        return None

    covariance = Y.T @ X / len(source)
    U, D, Vt = np.linalg.svd(covariance)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / (X ** 2).sum(axis=1).mean()) if with_scale else 1.0
    return scale, R, mu_t - scale * R @ mu_s


def kabsch(source: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) with target ~ R source + t"""
    result = umeyama(source, target, with_scale=False)
    if result is None:
        return np.eye(3), target.mean(axis=0) - source.mean(axis=0)
    return result[1], result[2]


def rotation_angle_deg(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Geodesic angle between batched rotations, via atan2 for accuracy near zero"""
    relative = np.swapaxes(A, -1, -2) @ B
    cos = (np.trace(relative, axis1=-2, axis2=-1) - 1.0) / 2.0
    vee = np.stack([relative[..., 2, 1] - relative[..., 1, 2], relative[..., 0, 2] - relative[..., 2, 0],
                    relative[..., 1, 0] - relative[..., 0, 1]], axis=-1)
    sin = np.linalg.norm(vee, axis=-1) / 2.0
    return np.degrees(np.arctan2(sin, cos))


def _pose_arrays(poses: Sequence[CameraPose]) -> Tuple[np.ndarray, np.ndarray]:
    rotations = np.stack([p.rotation_matrix().detach().cpu().numpy() for p in poses]).astype(np.float64)
    centers = np.stack([p.camera_center().detach().cpu().numpy() for p in poses]).astype(np.float64)
    return rotations, centers


def align_poses(estimated: Sequence[CameraPose],
                truth: Sequence[CameraPose]) -> Tuple[float, np.ndarray, np.ndarray, str]:
    """
    Global gauge (s, R, t) mapping estimated world coordinates onto the truth

    Umeyama on camera centres; when the centres are degenerate (static
    camera) the rotation comes from the mean relative orientation and s = 1.
    """
    R_est, c_est = _pose_arrays(estimated)
    R_gt, c_gt = _pose_arrays(truth)
    result = umeyama(c_est, c_gt)
    if result is not None and result[0] > 0:
        return result[0], result[1], result[2], 'similarity'

    M = (np.swapaxes(R_gt, -1, -2) @ R_est).sum(axis=0)
    U, _, Vt = np.linalg.svd(M)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R_align = U @ S @ Vt
    return 1.0, R_align, c_gt.mean(axis=0) - R_align @ c_est.mean(axis=0), 'orientation'


def pose_errors(estimated: Sequence[CameraPose],
                truth: Sequence[CameraPose]) -> Tuple[np.ndarray, np.ndarray, str]:
    """Per-frame geodesic error (degrees) and camera-centre error after gauge alignment"""
    scale, R_align, t_align, mode = align_poses(estimated, truth)
    R_est, c_est = _pose_arrays(estimated)
    R_gt, c_gt = _pose_arrays(truth)
    aligned_R = R_est @ R_align.T
    aligned_c = scale * c_est @ R_align.T + t_align
    return rotation_angle_deg(R_gt, aligned_R), np.linalg.norm(aligned_c - c_gt, axis=1), mode


def psnr(image: Tensor, reference: Tensor, mask: Tensor, cap: float = 60.0) -> float:
    """PSNR over masked pixels for images in [0, 1], capped at `cap` dB"""
    region = mask.bool()
    if not bool(region.any()):
        return cap
    mse = float(((image[region] - reference[region].to(image.dtype)) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


@torch.no_grad()
def heldout_psnr(outputs: RunOutputs, aligned_vertices: Tensor, scene, azimuths: Sequence[float],
                 settings: RenderSettings, cap: float) -> List[float]:
    """Mean PSNR over the held-out views of every frame"""
    views = scene.heldout_poses(azimuths)
    per_frame = []
    for k in range(scene.num_frames):
        estimate = realize(outputs.gaussians, outputs.canonical.with_vertices(aligned_vertices[k]))
        truth = realize(scene.gaussians, scene.mesh_at(k))
        values = []
        for pose in views:
            a = render(estimate, pose, settings)
            b = render(truth, pose, settings)
            mask = (a.alpha > MASK_THRESHOLD) | (b.alpha > MASK_THRESHOLD)
            values.append(psnr(a.rgb, b.rgb, mask, cap))
        per_frame.append(float(np.mean(values)))
    return per_frame


def evaluate(outputs: RunOutputs, scene, config) -> MetricsReport:
    """
    Score a run against the scene ground truth

    Poses are compared modulo one global similarity, vertices after one rigid
    alignment per sequence; held-out views are rendered from the aligned
    vertices.
    """
    angles, center_errors, mode = pose_errors(outputs.poses, scene.poses)

    estimate = outputs.vertices.detach().to(torch.float64).cpu().numpy()
    truth = scene.vertices.detach().to(torch.float64).cpu().numpy()
    R, t = kabsch(estimate.reshape(-1, 3), truth.reshape(-1, 3))
    aligned = estimate @ R.T + t
    vertex_errors = np.linalg.norm(aligned - truth, axis=-1)
    diagonal = scene.canonical.bounding_box_diagonal()

    aligned_vertices = torch.tensor(aligned, dtype=outputs.vertices.dtype)
    per_frame = heldout_psnr(outputs, aligned_vertices, scene, config.HELDOUT_AZIMUTHS,
                             RenderSettings.from_config(config), float(config.PSNR_CAP))

    report = MetricsReport(
        pose_error_mean_deg=float(angles.mean()),
        pose_error_median_deg=float(np.median(angles)),
        translation_error_mean=float(center_errors.mean()),
        vertex_error_mean=float(vertex_errors.mean()),
        vertex_error_relative=float(vertex_errors.mean() / diagonal) if diagonal > 0 else 0.0,
        psnr_mean=float(np.mean(per_frame)) if per_frame else float(config.PSNR_CAP),
        psnr_per_frame=per_frame,
        runtime_seconds=float(outputs.runtime_seconds),
        alignment=mode,
    )
    logger.info(f"Metrics: pose median {report.pose_error_median_deg:.3f}deg, "
                f"translation {report.translation_error_mean:.4f}, vertex {report.vertex_error_mean:.4f} "
                f"({100 * report.vertex_error_relative:.2f}% of diagonal), PSNR {report.psnr_mean:.2f} dB")
    return report
