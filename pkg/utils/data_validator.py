#!/usr/bin/env python3
"""
Data Validator for the reconstruction pipeline
Checks meshes, intrinsics, sequences, track sets and pose lists before use
"""

import logging
import math
from typing import Any, List, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

TRACK_DIRECTIONS = ('forward', 'reverse', 'keyframe')


def _as_numpy(value: Any) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


class DataValidator:
    """Validation and quality scoring for pipeline inputs"""

    def __init__(self):
        self.required_fields = {
            'mesh': ['vertices', 'faces'],
            'intrinsics': ['focal', 'cx', 'cy', 'width', 'height'],
            'sequence': ['frames', 'intrinsics'],
            'tracks': ['positions', 'visibility', 'direction', 'start'],
        }

        self.quality_weights = {
            'visibility': 0.6,
            'persistence': 0.4,
        }

        self.min_image_size = 16
        self.min_frames = 2

    def validate(self, obj: Any, data_type: str) -> Tuple[bool, List[str]]:
        """
        Validate a single pipeline object

        Args:
            obj: Object to validate (TriMesh, Intrinsics or dict, SequenceInput,
                 TrackSet, list of CameraPose)
            data_type: One of mesh, intrinsics, sequence, tracks, poses

        Returns:
            Tuple of (is_valid, list_of_errors)
        """
        errors = []

        for name in self.required_fields.get(data_type, []):
            present = name in obj if isinstance(obj, dict) else hasattr(obj, name)
            if not present:
                errors.append(f"Missing required field: {name}")
        if errors:
            return False, errors

        if data_type == 'mesh':
            errors.extend(self._validate_mesh(obj))
        elif data_type == 'intrinsics':
            errors.extend(self._validate_intrinsics(obj))
        elif data_type == 'sequence':
            errors.extend(self._validate_sequence(obj))
        elif data_type == 'tracks':
            errors.extend(self._validate_tracks(obj))
        elif data_type == 'poses':
            errors.extend(self._validate_poses(obj))
        else:
            errors.append(f"Unknown data type: {data_type}")

        return len(errors) == 0, errors

    def _validate_mesh(self, mesh: Any) -> List[str]:
        """Shapes, finite coordinates, index range, manifold edges"""
        errors = []
        vertices = _as_numpy(mesh.vertices)
        faces = _as_numpy(mesh.faces)

        if vertices.ndim != 2 or vertices.shape[1] != 3:
            errors.append(f"Vertices must have shape (V, 3), got {vertices.shape}")
            return errors
        if faces.ndim != 2 or faces.shape[1] != 3:
            errors.append(f"Faces must have shape (F, 3), got {faces.shape}")
            return errors
        if not np.isfinite(vertices).all():
            errors.append("Vertices contain non-finite coordinates")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            errors.append(f"Face indices out of range [0, {len(vertices)})")
            return errors

        if faces.size:
            edges = np.sort(np.concatenate([faces[:, [1, 2]], faces[:, [2, 0]], faces[:, [0, 1]]]), axis=1)
            _, counts = np.unique(edges, axis=0, return_counts=True)
            non_manifold = int((counts > 2).sum())
            if non_manifold:
                errors.append(f"{non_manifold} edges are shared by more than two faces")

        edge_weights = getattr(mesh, 'edge_weights', None)
        if edge_weights is not None and not np.isfinite(_as_numpy(edge_weights.weights)).all():
            errors.append("Edge weights contain non-finite values")

        return errors

    def _validate_intrinsics(self, intrinsics: Any) -> List[str]:
        errors = []
        get = intrinsics.get if isinstance(intrinsics, dict) else lambda k: getattr(intrinsics, k)

        try:
            focal = float(get('focal'))
            if not (math.isfinite(focal) and focal > 0):
                errors.append("Focal length must be positive")
        except (ValueError, TypeError):
            errors.append("Invalid focal length format")

        for key in ('width', 'height'):
            try:
                if int(get(key)) < self.min_image_size:
                    errors.append(f"Image {key} must be at least {self.min_image_size} pixels")
            except (ValueError, TypeError):
                errors.append(f"Invalid image {key} format")

        for key in ('cx', 'cy'):
            try:
                if not math.isfinite(float(get(key))):
                    errors.append(f"Principal point {key} must be finite")
            except (ValueError, TypeError):
                errors.append(f"Invalid principal point {key} format")

        return errors

    def _validate_sequence(self, sequence: Any) -> List[str]:
        """Frame count, resolution consistency, mask shapes, intrinsics"""
        errors = []
        frames = _as_numpy(sequence.frames)

        if frames.ndim != 4 or frames.shape[-1] != 3:
            errors.append(f"Frames must have shape (K, H, W, 3), got {frames.shape}")
            return errors
        if frames.shape[0] < self.min_frames:
            errors.append(f"Sequence needs at least {self.min_frames} frames, got {frames.shape[0]}")

        masks = getattr(sequence, 'masks', None)
        if masks is not None:
            masks = _as_numpy(masks)
            if masks.shape != frames.shape[:3]:
                errors.append(f"Mask shape {masks.shape} does not match frames {frames.shape[:3]}")

        intrinsics = sequence.intrinsics
        errors.extend(self._validate_intrinsics(intrinsics))
        if not errors and (intrinsics.width != frames.shape[2] or intrinsics.height != frames.shape[1]):
            errors.append(f"Intrinsics image size {intrinsics.width}x{intrinsics.height} does not match "
                          f"frames {frames.shape[2]}x{frames.shape[1]}")

        return errors

    def _validate_tracks(self, tracks: Any) -> List[str]:
        errors = []
        positions = _as_numpy(tracks.positions)
        visibility = _as_numpy(tracks.visibility)

        if positions.ndim != 3 or positions.shape[2] != 2:
            errors.append(f"Track positions must have shape (D, K, 2), got {positions.shape}")
            return errors
        if visibility.shape != positions.shape[:2]:
            errors.append(f"Visibility shape {visibility.shape} does not match positions {positions.shape[:2]}")
            return errors
        if visibility.dtype != np.bool_:
            errors.append(f"Visibility must be boolean, got {visibility.dtype}")
        elif not np.isfinite(positions[visibility]).all():
            errors.append("Track positions are non-finite where visible")

        if tracks.direction not in TRACK_DIRECTIONS:
            errors.append(f"Invalid track direction. Must be one of: {list(TRACK_DIRECTIONS)}")
        num_frames = positions.shape[1]
        if not 0 <= int(tracks.start) < max(num_frames, 1):
            errors.append(f"Chunk start {tracks.start} outside [0, {num_frames})")

        return errors

    def _validate_poses(self, poses: Any) -> List[str]:
        errors = []
        if len(poses) == 0:
            errors.append("Pose list is empty")
        for index, pose in enumerate(poses):
            q = _as_numpy(pose.rotation)
            t = _as_numpy(pose.translation)
            if q.shape != (4,) or t.shape != (3,):
                errors.append(f"Pose {index}: expected quaternion (4,) and translation (3,)")
                continue
            if not (np.isfinite(q).all() and np.isfinite(t).all()):
                errors.append(f"Pose {index}: non-finite values")
            elif np.linalg.norm(q) < 1e-12:
                errors.append(f"Pose {index}: zero quaternion")
        return errors

    def calculate_track_quality(self, tracks: Any) -> float:
        """
        Quality score for a track set

        Returns:
            Score between 0.0 and 1.0 (visible fraction and the share of
            points seen in at least two frames)
        """
        visibility = _as_numpy(tracks.visibility)
        if visibility.size == 0:
            return 0.0

        scores = {
            'visibility': float(visibility.mean()),
            'persistence': float((visibility.sum(axis=1) >= 2).mean()),
        }
        total_score = sum(scores[metric] * self.quality_weights[metric] for metric in scores)
        return round(total_score, 3)
