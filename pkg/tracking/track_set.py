#!/usr/bin/env python3
"""
Track sets and the binary track file
Record layout: magic "PAD3RTRK", version u32, K u32, D u32, direction u8,
start u32, then D x K little-endian f32 (x, y) pairs and D x K visibility
bytes. A file may hold several records back to back.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
from torch import Tensor

from exceptions import TrackFormatError
from utils.data_validator import DataValidator

logger = logging.getLogger(__name__)

TRACK_MAGIC = b"PAD3RTRK"
TRACK_VERSION = 1
HEADER_DTYPE = np.dtype([('magic', 'S8'), ('version', '<u4'), ('frames', '<u4'), ('points', '<u4'),
                         ('direction', 'u1'), ('start', '<u4')])
DIRECTION_CODES = {'forward': 0, 'reverse': 1, 'keyframe': 2}
DIRECTION_NAMES = {code: name for name, code in DIRECTION_CODES.items()}


@dataclass
class TrackSet:
    """
    2D trajectories of D points over K frames

    positions [D, K, 2] in pixels, visibility [D, K] bool. Frames outside the
    chunk are simply invisible.
    """
    positions: Tensor
    visibility: Tensor
    direction: str
    start: int

    @property
    def num_points(self) -> int:
        return int(self.positions.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.positions.shape[1])

    @classmethod
    def empty(cls, num_frames: int, direction: str, start: int) -> 'TrackSet':
        return cls(torch.zeros(0, num_frames, 2, dtype=torch.float64),
                   torch.zeros(0, num_frames, dtype=torch.bool), direction, start)

    def subset(self, ids: Tensor) -> 'TrackSet':
        return TrackSet(self.positions[ids], self.visibility[ids], self.direction, self.start)

    def flow(self, i: int, j: int) -> Tensor:
        """F_{i->j} = x_j - x_i per point"""
        return self.positions[:, j] - self.positions[:, i]


def encode_trackset(tracks: TrackSet) -> bytes:
    header = np.array([(TRACK_MAGIC, TRACK_VERSION, tracks.num_frames, tracks.num_points,
                        DIRECTION_CODES[tracks.direction], tracks.start)], dtype=HEADER_DTYPE)
    visibility = tracks.visibility.cpu().numpy().astype(np.uint8)
    positions = np.where(visibility[..., None].astype(bool), tracks.positions.detach().cpu().numpy(), 0.0)
    return header.tobytes() + positions.astype('<f4').tobytes() + visibility.tobytes()


def export_tracks(path: str, tracksets: Sequence[TrackSet]) -> str:
    """Write one record per track set; positions are stored as float32"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        for tracks in tracksets:
            f.write(encode_trackset(tracks))
    logger.debug(f"Exported {len(tracksets)} track sets to {path}")
    return path


def decode_tracks(data: bytes, source: str = '<bytes>') -> List[TrackSet]:
    """Decode every record; errors name the byte offset"""
    tracksets = []
    validator = DataValidator()
    offset = 0
    while offset < len(data):
        if offset + HEADER_DTYPE.itemsize > len(data):
            raise TrackFormatError(f"Truncated track header in {source}", offset=len(data))
        header = np.frombuffer(data[offset:offset + HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0]
        if bytes(header['magic']) != TRACK_MAGIC:
            raise TrackFormatError(f"Bad track magic {bytes(header['magic'])!r} in {source}", offset=offset)
        if int(header['version']) != TRACK_VERSION:
            raise TrackFormatError(f"Unknown track file version {int(header['version'])} in {source}",
                                   offset=offset + 8)
        code = int(header['direction'])
        if code not in DIRECTION_NAMES:
            raise TrackFormatError(f"Unknown track direction code {code} in {source}", offset=offset + 20)

        frames, points = int(header['frames']), int(header['points'])
        body = offset + HEADER_DTYPE.itemsize
        pos_bytes = points * frames * 2 * 4
        vis_bytes = points * frames
        if body + pos_bytes + vis_bytes > len(data):
            raise TrackFormatError(f"Truncated track record in {source}: expected {pos_bytes + vis_bytes} "
                                   f"payload bytes", offset=len(data))

        positions = np.frombuffer(data[body:body + pos_bytes], dtype='<f4').reshape(points, frames, 2)
        raw_vis = np.frombuffer(data[body + pos_bytes:body + pos_bytes + vis_bytes], dtype=np.uint8)
        if raw_vis.size and raw_vis.max() > 1:
            raise TrackFormatError(f"Visibility bytes must be 0 or 1 in {source}", offset=body + pos_bytes)

        tracks = TrackSet(torch.from_numpy(positions.astype(np.float64)),
                          torch.from_numpy(raw_vis.reshape(points, frames).astype(bool)),
                          DIRECTION_NAMES[code], int(header['start']))
        is_valid, errors = validator.validate(tracks, 'tracks')
        if not is_valid:
            raise TrackFormatError(f"Invalid track record in {source}: " + '; '.join(errors), offset=offset)
        tracksets.append(tracks)
        offset = body + pos_bytes + vis_bytes

    if tracksets and len({t.num_frames for t in tracksets}) > 1:
        raise TrackFormatError(f"Track records in {source} disagree on the frame count")
    return tracksets


def import_tracks(path: str) -> List[TrackSet]:
    with open(path, 'rb') as f:
        data = f.read()
    tracksets = decode_tracks(data, path)
    validator = DataValidator()
    for tracks in tracksets:
        quality = validator.calculate_track_quality(tracks)
        logger.info(f"Imported {tracks.direction} chunk (start {tracks.start}): {tracks.num_points} points, "
                    f"quality {quality}")
    return tracksets
