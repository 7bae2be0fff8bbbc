#!/usr/bin/env python3
"""
Artifact Exporter
Run directories (advisory lock, JSON/CSV/PNG writers, failure reports) and
export of synthetic scenes in the generic frame-directory format
"""

import json
import logging
import os
import traceback
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from PIL import Image

from deformation.timeline import save_timeline
from exceptions import RunDirectoryLockedError
from geometry.mesh_io import save_mesh
from pose.pose_regressor import write_pose_jsonl
from tracking.track_set import TrackSet, export_tracks

logger = logging.getLogger(__name__)

LOCK_NAME = '.lock'


def _to_uint8(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.asarray(image)
    if image.dtype == np.bool_:
        return image.astype(np.uint8) * 255
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str, image) -> str:
    """[H, W, 3] or [H, W] image in [0, 1] (or bool / uint8) to PNG"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(_to_uint8(image)).save(path)
    return path


class RunDirectory:
    """
    One run's output directory

    Holds an advisory lock file while open; a second RunDirectory on the same
    path raises RunDirectoryLockedError until the first is closed.
    """

    def __init__(self, path: str, lock: bool = True):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.files_written: List[str] = []
        self._lock_path = os.path.join(path, LOCK_NAME)
        self._locked = False
        if lock:
            self.acquire()

    def acquire(self):
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirectoryLockedError(f"Run directory {self.path} is in use (remove {self._lock_path} "
                                          f"if no other process owns it)")
        with os.fdopen(fd, 'w') as f:
            f.write(str(os.getpid()))
        self._locked = True

    def release(self):
        if self._locked:
            try:
                os.remove(self._lock_path)
            except FileNotFoundError:
                pass
            self._locked = False

    def __enter__(self) -> 'RunDirectory':
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()

    def path_for(self, name: str) -> str:
        full = os.path.join(self.path, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def exists(self, name: str) -> bool:
        return os.path.exists(os.path.join(self.path, name))

    def _record(self, path: str) -> str:
        if path not in self.files_written:
            self.files_written.append(path)
        return path

    def write_json(self, name: str, data: Dict[str, Any]) -> str:
        path = self.path_for(name)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        return self._record(path)

    def read_json(self, name: str) -> Dict[str, Any]:
        with open(os.path.join(self.path, name), 'r', encoding='utf-8') as f:
            return json.load(f)

    def write_csv(self, name: str, df: pd.DataFrame) -> str:
        path = self.path_for(name)
        df.to_csv(path, index=False, encoding='utf-8')
        return self._record(path)

    def write_png(self, name: str, image) -> str:
        return self._record(write_png(self.path_for(name), image))

    def write_config(self, config) -> str:
        return self._record(config.snapshot(self.path_for('config.snapshot')))

    def write_poses(self, name: str, poses, sigmas: Optional[Sequence[float]] = None) -> str:
        return self._record(write_pose_jsonl(self.path_for(name), poses, sigmas))

    def write_timeline(self, timeline) -> str:
        return self._record(save_timeline(timeline, self.path_for('timeline.bin')))

    def write_tracks(self, tracksets: Dict[Any, TrackSet]) -> List[str]:
        """One file per chunk under tracks/"""
        paths = []
        for chunk, tracks in sorted(tracksets.items()):
            paths.append(self._record(export_tracks(self.path_for(f"tracks/{chunk.name}.trk"), [tracks])))
        return paths

    def write_torch(self, name: str, obj: Any) -> str:
        path = self.path_for(name)
        torch.save(obj, path)
        return self._record(path)

    def write_failure_report(self, stage: str, error: BaseException, completed: Sequence[str]) -> str:
        """failure_report.json naming the failed stage and what finished before it"""
        report = {
            'failed_stage': stage,
            'error_type': type(error).__name__,
            'message': str(error),
            'completed_stages': list(completed),
            'files_written': [os.path.relpath(p, self.path) for p in self.files_written],
            'traceback': ''.join(traceback.format_exception(type(error), error, error.__traceback__)),
        }
        path = self.write_json('failure_report.json', report)
        logger.error(f"Stage '{stage}' failed: {error} (report: {path})")
        return path


def export_sequence(scene, directory: str, tracksets: Optional[Dict[Any, TrackSet]] = None) -> Dict[str, Any]:
    """
    Write a synthetic scene as a frame directory with its ground truth

    Frames and masks as PNG, meta.json with intrinsics, keyframe, keyframe
    pose and scene parameters, the canonical mesh as mesh.ply, tracks under
    tracks/ and ground truth under ground_truth/.
    """
    os.makedirs(directory, exist_ok=True)
    for k in range(scene.num_frames):
        write_png(os.path.join(directory, f"{k:06d}.png"), scene.frames[k])
        write_png(os.path.join(directory, 'masks', f"{k:06d}.png"), scene.masks[k])

    meta = {
        'intrinsics': scene.intrinsics.to_dict(),
        'keyframe': scene.keyframe,
        'keyframe_pose': scene.poses[scene.keyframe].to_dict(),
        'scene': scene.params,
        'orbit': {'radius': scene.radius, 'elevation_degrees': scene.elevation_degrees,
                  'arc_degrees': scene.arc_degrees, 'center': scene.center.tolist()},
    }
    with open(os.path.join(directory, 'meta.json'), 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)

    save_mesh(scene.canonical, os.path.join(directory, 'mesh.ply'))
    truth = os.path.join(directory, 'ground_truth')
    os.makedirs(truth, exist_ok=True)
    write_pose_jsonl(os.path.join(truth, 'poses.jsonl'), scene.poses)
    save_timeline(scene.timeline, os.path.join(truth, 'timeline.bin'))
    np.save(os.path.join(truth, 'vertices.npy'), scene.vertices.detach().cpu().numpy())
    np.save(os.path.join(truth, 'depths.npy'), scene.depths.detach().cpu().numpy())

    track_files = []
    for chunk, tracks in sorted((tracksets or {}).items()):
        track_files.append(export_tracks(os.path.join(directory, 'tracks', f"{chunk.name}.trk"), [tracks]))

    logger.info(f"Exported {scene.name} ({scene.num_frames} frames, {len(track_files)} track files) to {directory}")
    return {'directory': directory, 'frames': scene.num_frames, 'track_files': track_files, 'meta': meta}
