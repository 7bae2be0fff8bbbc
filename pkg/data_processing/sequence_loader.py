#!/usr/bin/env python3
"""
Sequence Loader
Reads the generic frame-directory format: 000000.png..., optional masks/,
optional meta.json, mesh.ply/mesh.obj and tracks/*.trk
"""

import glob
import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from exceptions import SequenceFormatError
from geometry.camera import Intrinsics
from geometry.mesh import TriMesh
from geometry.mesh_io import load_mesh
from tracking.track_set import TrackSet, import_tracks
from utils.data_validator import DataValidator

logger = logging.getLogger(__name__)

FRAME_PATTERN = re.compile(r'^\d{6}\.png$')
MESH_NAMES = ('mesh.ply', 'mesh.obj')


@dataclass
class SequenceInput:
    """Frames [K, H, W, 3] in [0, 1], masks [K, H, W] and everything found next to them"""
    frames: Tensor
    masks: Tensor
    intrinsics: Intrinsics
    keyframe: Optional[int] = None
    mesh: Optional[TriMesh] = None
    tracksets: List[TrackSet] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def frame_name(index: int) -> str:
    return f"{index:06d}.png"


def _read_png(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert(mode))
    except OSError as e:
        raise SequenceFormatError(f"Unreadable image {path}: {e}") from e


def derive_masks(frames: np.ndarray) -> np.ndarray:
    """Non-black pixels of 8-bit frames [K, H, W, 3]"""
    return frames.max(axis=-1) > 0


def load_sequence(path: str, dtype=torch.float64) -> SequenceInput:
    """
    Load and validate a frame directory

    Raises SequenceFormatError for an empty or missing directory, unreadable
    images and resolution mismatches. Missing masks are derived by
    thresholding non-black pixels; a missing meta.json falls back to default
    intrinsics. Both cases log a warning.
    """
    if not os.path.isdir(path):
        raise SequenceFormatError(f"Sequence directory not found: {path}")
    names = sorted(n for n in os.listdir(path) if FRAME_PATTERN.match(n))
    if not names:
        raise SequenceFormatError(f"No frames (000000.png, ...) in {path}")

    frames = []
    for name in names:
        image = _read_png(os.path.join(path, name), 'RGB')
        if frames and image.shape != frames[0].shape:
            raise SequenceFormatError(f"Frame {name} is {image.shape[1]}x{image.shape[0]}, expected "
                                      f"{frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(image)
    frames = np.stack(frames)

    mask_dir = os.path.join(path, 'masks')
    if os.path.isdir(mask_dir):
        masks = []
        for name in names:
            mask_path = os.path.join(mask_dir, name)
            if not os.path.exists(mask_path):
                raise SequenceFormatError(f"Mask missing for frame {name} in {mask_dir}")
            mask = _read_png(mask_path, 'L')
            if mask.shape != frames.shape[1:3]:
                raise SequenceFormatError(f"Mask {name} is {mask.shape[1]}x{mask.shape[0]}, frames are "
                                          f"{frames.shape[2]}x{frames.shape[1]}")
            masks.append(mask > 127)
        masks = np.stack(masks)
    else:
        logger.warning(f"No masks/ in {path}; deriving masks from non-black pixels")
        masks = derive_masks(frames)

    meta: Dict[str, Any] = {}
    meta_path = os.path.join(path, 'meta.json')
    if os.path.exists(meta_path):
        try:
            with open(meta_path, 'r', encoding='utf-8') as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise SequenceFormatError(f"Unreadable meta.json in {path}: {e}") from e
    height, width = frames.shape[1:3]
    if 'intrinsics' in meta:
        is_valid, errors = DataValidator().validate(meta['intrinsics'], 'intrinsics')
        if not is_valid:
            raise SequenceFormatError(f"Invalid intrinsics in {meta_path}: {'; '.join(errors)}")
        intrinsics = Intrinsics.from_dict(meta['intrinsics'])
    else:
        logger.warning(f"No intrinsics for {path}; using focal = width, centred principal point")
        intrinsics = Intrinsics.default_for(width, height)

    mesh = None
    for name in MESH_NAMES:
        if os.path.exists(os.path.join(path, name)):
            mesh = load_mesh(os.path.join(path, name), dtype=dtype)
            break

    tracksets: List[TrackSet] = []
    for track_path in sorted(glob.glob(os.path.join(path, 'tracks', '*.trk'))):
        tracksets.extend(import_tracks(track_path))

    keyframe = meta.get('keyframe')
    sequence = SequenceInput(torch.from_numpy(frames).to(dtype) / 255.0, torch.from_numpy(masks), intrinsics,
                             int(keyframe) if keyframe is not None else None, mesh, tracksets, meta, path)

    is_valid, errors = DataValidator().validate(sequence, 'sequence')
    if not is_valid:
        raise SequenceFormatError(f"Invalid sequence {path}: {'; '.join(errors)}")
    if sequence.keyframe is not None and not 0 <= sequence.keyframe < sequence.num_frames:
        raise SequenceFormatError(f"Keyframe {sequence.keyframe} outside [0, {sequence.num_frames})")

    logger.info(f"Loaded {sequence.num_frames} frames at {width}x{height} from {path} "
                f"({len(tracksets)} track sets, mesh {'found' if mesh is not None else 'absent'})")
    return sequence
