#!/usr/bin/env python3
"""
Multi-block tracking schedule
Forward chunks start at i*stride and run to the last frame; reverse chunks
start at K-1-i*stride and run back to frame 0.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from exceptions import InternalError

logger = logging.getLogger(__name__)

DIRECTION_ORDER = {'forward': 0, 'reverse': 1, 'keyframe': 2}


@dataclass(frozen=True, order=True)
class ChunkSpec:
    direction: str
    index: int
    start: int

    def first_last(self, num_frames: int) -> Tuple[int, int]:
        """Inclusive frame range covered by the chunk"""
        if self.direction == 'forward':
            return self.start, num_frames - 1
        if self.direction == 'reverse':
            return 0, self.start
        return 0, num_frames - 1

    def covers(self, frame: int, num_frames: int) -> bool:
        lo, hi = self.first_last(num_frames)
        return lo <= frame <= hi

    def frames(self, num_frames: int) -> List[int]:
        """Frames in tracking order"""
        lo, hi = self.first_last(num_frames)
        if self.direction == 'reverse':
            return list(range(hi, lo - 1, -1))
        return list(range(lo, hi + 1))

    @property
    def name(self) -> str:
        return f"{self.direction}_{self.index:03d}_start{self.start:04d}"


@dataclass(frozen=True)
class ChunkSchedule:
    num_frames: int
    stride: int
    mode: str
    chunks: Tuple[ChunkSpec, ...]

    @property
    def num_blocks(self) -> int:
        """L = ceil(K / stride)"""
        return math.ceil(self.num_frames / self.stride)

    @property
    def forward(self) -> List[ChunkSpec]:
        return [c for c in self.chunks if c.direction == 'forward']

    @property
    def reverse(self) -> List[ChunkSpec]:
        return [c for c in self.chunks if c.direction == 'reverse']

    def covering(self, i: int, j: int) -> List[ChunkSpec]:
        return [c for c in self.chunks if c.covers(i, self.num_frames) and c.covers(j, self.num_frames)]


def build_chunk_schedule(num_frames: int, stride: int, mode: str = 'bidirectional') -> ChunkSchedule:
    """Schedule of L = ceil(K / stride) forward (and reverse) chunks"""
    if num_frames < 1:
        raise ValueError(f"Need at least one frame, got {num_frames}")
    if not 1 <= stride <= num_frames:
        raise ValueError(f"Chunk stride must be in [1, {num_frames}], got {stride}")
    if mode not in ('bidirectional', 'forward'):
        raise ValueError(f"Unknown chunk mode '{mode}' (expected bidirectional or forward)")

    count = math.ceil(num_frames / stride)
    chunks = [ChunkSpec('forward', i, i * stride) for i in range(count)]
    if mode == 'bidirectional':
        chunks += [ChunkSpec('reverse', i, num_frames - 1 - i * stride) for i in range(count)]
    logger.debug(f"Chunk schedule K={num_frames} stride={stride} mode={mode}: {len(chunks)} chunks")
    return ChunkSchedule(num_frames, stride, mode, tuple(chunks))


def covisible_count(tracks, i: int, j: int) -> int:
    visibility = tracks.visibility
    if visibility.shape[0] == 0:
        return 0
    return int((visibility[:, i] & visibility[:, j]).sum())


def select_chunk(schedule: ChunkSchedule, tracksets: Mapping[ChunkSpec, object], i: int, j: int) -> ChunkSpec:
    """
    Covering chunk with the most points visible in both frames

    Ties go to the lower start frame, then forward before reverse.
    """
    best: Optional[Tuple[Tuple[int, int, int], ChunkSpec]] = None
    for chunk in schedule.covering(i, j):
        if chunk not in tracksets:
            continue
        key = (-covisible_count(tracksets[chunk], i, j), chunk.start, DIRECTION_ORDER[chunk.direction])
        if best is None or key < best[0]:
            best = (key, chunk)
    if best is None:
        raise InternalError(f"No tracked chunk covers frames ({i}, {j})")
    return best[1]


def keyframe_chunk(keyframe: int) -> ChunkSpec:
    """The single-pass chunk tracked forward and backward from the keyframe"""
    return ChunkSpec('keyframe', 0, keyframe)


def assign_chunks(schedule: ChunkSchedule, tracksets: Sequence) -> Dict[ChunkSpec, object]:
    """
    Key loaded track sets by the chunk they were tracked for

    Matches on direction and start frame; keyframe tracks get the keyframe
    chunk. Track sets with no matching chunk are skipped with a warning.
    """
    by_start = {(c.direction, c.start): c for c in schedule.chunks}
    assigned: Dict[ChunkSpec, object] = {}
    for tracks in tracksets:
        if tracks.direction == 'keyframe':
            chunk = keyframe_chunk(tracks.start)
        else:
            chunk = by_start.get((tracks.direction, tracks.start))
        if chunk is None:
            logger.warning(f"No {tracks.direction} chunk starts at frame {tracks.start}; track set skipped")
            continue
        assigned[chunk] = tracks
    return assigned
