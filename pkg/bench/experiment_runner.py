#!/usr/bin/env python3
"""
Experiment Runner - full reconstruction pipeline with artifacts
static fit -> pose regressor -> pose init -> 4D optimization -> evaluation
"""

import copy
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from bench.metrics import MetricsReport, RunOutputs, evaluate
from bench.synthetic_scenes import SyntheticScene, make_scene, oracle_appearance, orbit_pose, select_keyframe
from data_processing.artifact_exporter import RunDirectory
from data_processing.sequence_loader import SequenceInput
from deformation.control_nodes import default_node_count, sample_control_nodes, save_control_nodes
from deformation.timeline import build_timeline
from exceptions import SequenceFormatError, StageError
from gaussians.splat_renderer import RenderSettings, save_render_png
from gaussians.surface_gaussians import SurfaceGaussianSet, attach_gaussians, realize
from geometry.camera import CameraPose
from geometry.mesh import TriMesh
from optimization.optimize_4d import OptimizeResult, optimize_4d
from optimization.scene_model import SceneModel
from optimization.static_fit import fit_static
from pose.delta_pose import build_delta_poses
from pose.pose_regressor import (PoseRegressor, evaluate_pose_regressor, initialize_video_poses,
                                 save_regressor, train_pose_regressor)
from tracking.chunk_schedule import ChunkSchedule, ChunkSpec, assign_chunks, build_chunk_schedule, keyframe_chunk
from tracking.oracle_tracks import oracle_tracks
from tracking.track_set import TrackSet

logger = logging.getLogger(__name__)

STAGES = ('scene', 'static_fit', 'train_pose', 'init_poses', 'tracks', 'optimize', 'evaluate')

ABLATION_VARIANTS = {
    'full': {},
    'no_pose_init': {'ABLATION_NO_POSE_INIT': True},
    'no_track': {'ABLATION_NO_TRACK': True},
    'no_multi_track': {'ABLATION_NO_MULTI_TRACK': True},
    'no_pose_refine': {'ABLATION_NO_POSE_REFINE': True},
}
ABLATION_COLUMNS = ['variant', 'seed', 'pose_error_median_deg', 'translation_error_mean', 'vertex_error_mean',
                    'psnr_mean', 'runtime_seconds']
COVERAGE_COLUMNS = ['arc_degrees', 'seed', 'psnr_mean', 'pose_error_median_deg', 'vertex_error_mean']


def seed_everything(seed: int, deterministic: bool = False):
    """Seed torch; with `deterministic`, single-threaded deterministic kernels"""
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def scene_sequence(scene: SyntheticScene) -> SequenceInput:
    """In-memory view of a synthetic scene as pipeline input"""
    meta = {'keyframe': scene.keyframe, 'keyframe_pose': scene.poses[scene.keyframe].to_dict(),
            'scene': scene.params}
    return SequenceInput(scene.frames, scene.masks, scene.intrinsics, scene.keyframe, scene.canonical, [], meta)


def sequence_keyframe(sequence: SequenceInput, config) -> int:
    """Explicit keyframe, else the config override, else the largest mask"""
    if sequence.keyframe is not None:
        return sequence.keyframe
    if config.KEYFRAME >= 0:
        return int(config.KEYFRAME)
    return select_keyframe(sequence.masks)


def reference_pose(sequence: SequenceInput, canonical: TriMesh, config) -> CameraPose:
    """Keyframe camera: from meta.json when present, else facing the mesh from +z"""
    if 'keyframe_pose' in sequence.meta:
        return CameraPose.from_dict(sequence.meta['keyframe_pose'], sequence.intrinsics)
    return orbit_pose(0.0, 0.0, config.CAMERA_RADIUS, canonical.centroid().detach(), sequence.intrinsics)


def masked_frames(sequence: SequenceInput) -> torch.Tensor:
    return sequence.frames * sequence.masks[..., None].to(sequence.frames.dtype)


def build_static_model(sequence: SequenceInput, canonical: TriMesh, keyframe: int, pose: CameraPose,
                       config) -> Tuple[SurfaceGaussianSet, pd.DataFrame]:
    """Surface Gaussians on the canonical mesh with oracle or keyframe-fitted appearance"""
    gaussians = attach_gaussians(canonical)
    mode = config.STATIC_APPEARANCE
    if mode == 'oracle' and 'scene' not in sequence.meta:
        logger.warning("Oracle appearance needs a harness-generated sequence; fitting the keyframe instead")
        mode = 'fit'
    if mode == 'oracle':
        return oracle_appearance(gaussians, canonical), pd.DataFrame(columns=['step', 'rgb'])
    if mode != 'fit':
        raise ValueError(f"Unknown static appearance '{mode}' (expected oracle or fit)")
    history = fit_static(gaussians, canonical, sequence.frames[keyframe], sequence.masks[keyframe], pose, config)
    return gaussians, history


def train_regressor(gaussians: SurfaceGaussianSet, canonical: TriMesh, sequence: SequenceInput, config,
                    seed: int):
    """Train the pose regressor on renders of the static model; returns (regressor, history, report)"""
    with torch.no_grad():
        world = realize(gaussians, canonical)
    size = int(config.POSE_INPUT_SIZE)
    intrinsics = sequence.intrinsics.scaled(size, size)
    centroid = canonical.centroid().detach().tolist()
    regressor, history = train_pose_regressor(world, intrinsics, config, seed=seed, centroid=centroid)
    report = evaluate_pose_regressor(regressor, world, intrinsics, config, centroid=centroid)
    return regressor, history, report


def init_poses(regressor: Optional[PoseRegressor], sequence: SequenceInput, keyframe: int,
               reference: CameraPose, config):
    """Regressor poses per frame with the keyframe pinned to the reference; constant without pose init"""
    if config.ABLATION_NO_POSE_INIT or regressor is None:
        return [reference] * sequence.num_frames, [0.0] * sequence.num_frames
    poses, sigmas = initialize_video_poses(regressor, masked_frames(sequence), sequence.intrinsics)
    poses[keyframe] = reference
    return poses, sigmas


def make_oracle_tracksets(scene: SyntheticScene, schedule: ChunkSchedule, config,
                          seed: int) -> Dict[ChunkSpec, TrackSet]:
    """Oracle tracks for every scheduled chunk plus the keyframe chunk"""
    chunks = list(schedule.chunks) + [keyframe_chunk(scene.keyframe)]
    return {chunk: oracle_tracks(scene, chunk, config.TRACK_POINTS_PER_CHUNK, config.TRACK_NOISE_PX,
                                 seed=seed + index)
            for index, chunk in enumerate(chunks)}


def chunk_schedule(num_frames: int, config) -> ChunkSchedule:
    return build_chunk_schedule(num_frames, max(1, min(int(config.CHUNK_STRIDE), num_frames)), config.CHUNK_MODE)


def build_scene_model(canonical: TriMesh, gaussians: SurfaceGaussianSet, keyframe: int,
                      poses: List[CameraPose], config, seed: int, nodes=None, timeline=None) -> SceneModel:
    dtype = getattr(torch, config.DTYPE)
    num_frames = len(poses)
    if nodes is None:
        count = config.NODE_COUNT or default_node_count(canonical.num_vertices)
        nodes = sample_control_nodes(canonical, count, seed=seed, neighbors=config.SKIN_NEIGHBORS)
    if timeline is None:
        timeline = build_timeline(config.DEFORMATION_MODEL, num_frames, nodes.num_nodes, keyframe, dtype)
    delta = build_delta_poses(config.DELTA_POSE_MODEL, num_frames, keyframe, dtype)
    return SceneModel(canonical, gaussians, nodes, timeline, poses, delta, RenderSettings.from_config(config))


@dataclass
class ExperimentResult:
    metrics: Optional[MetricsReport]
    run_dir: str
    completed: List[str] = field(default_factory=list)
    optimize: Optional[OptimizeResult] = None
    pose_report: Dict[str, Any] = field(default_factory=dict)


class ExperimentRunner:
    """Runs every stage in order and persists what each produces"""

    def __init__(self, config, run_dir: str, seed: Optional[int] = None, oracle_init: bool = False,
                 save_renders: bool = True):
        self.config = config
        self.seed = config.SEED if seed is None else int(seed)
        self.oracle_init = oracle_init
        self.save_renders = save_renders
        self.run_dir_path = run_dir
        self.completed: List[str] = []
        self.timings: Dict[str, float] = {}
        self.state: Dict[str, Any] = {}

    def _stage(self, name: str, run_dir: RunDirectory, fn: Callable[[], Any]) -> Any:
        logger.info(f"[{len(self.completed) + 1}/{len(STAGES)}] {name}...")
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            run_dir.write_failure_report(name, e, self.completed)
            raise StageError(name, e) from e
        self.timings[name] = time.perf_counter() - start
        self.completed.append(name)
        logger.info(f"✓ {name} ({self.timings[name]:.1f}s)")
        return result

    def run(self, scene: Optional[SyntheticScene] = None,
            sequence: Optional[SequenceInput] = None) -> ExperimentResult:
        config = self.config
        seed_everything(self.seed, config.DETERMINISTIC)
        started = time.perf_counter()

        with RunDirectory(self.run_dir_path) as run_dir:
            run_dir.write_config(config)

            def stage_scene():
                nonlocal scene, sequence
                if sequence is None:
                    scene = scene or make_scene(config.SCENE_NAME, config, seed=self.seed)
                    sequence = scene_sequence(scene)
                if sequence.mesh is None:
                    raise SequenceFormatError("Sequence has no canonical mesh (mesh.ply / mesh.obj)")
            self._stage('scene', run_dir, stage_scene)

            canonical = sequence.mesh if sequence.mesh.edge_weights is not None \
                else sequence.mesh.with_cotangent_weights()
            keyframe = sequence_keyframe(sequence, config)
            reference = reference_pose(sequence, canonical, config)

            def stage_static():
                gaussians, history = build_static_model(sequence, canonical, keyframe, reference, config)
                run_dir.write_torch('static_model.pt', gaussians.state_dict())
                if len(history):
                    run_dir.write_csv('static_history.csv', history)
                return gaussians
            gaussians = self._stage('static_fit', run_dir, stage_static)
            gaussians.requires_grad_(False)

            use_oracle = self.oracle_init and scene is not None

            def stage_train():
                if use_oracle or config.ABLATION_NO_POSE_INIT:
                    logger.info("Pose regressor skipped")
                    return None
                regressor, history, report = train_regressor(gaussians, canonical, sequence, config, self.seed)
                save_regressor(regressor, run_dir.path_for('regressor.pt'))
                run_dir.write_csv('pose_history.csv', history)
                run_dir.write_json('pose_regressor.json', report)
                self.state['pose_report'] = report
                return regressor
            regressor = self._stage('train_pose', run_dir, stage_train)

            def stage_init():
                if use_oracle:
                    poses, sigmas = list(scene.poses), [0.0] * scene.num_frames
                else:
                    poses, sigmas = init_poses(regressor, sequence, keyframe, reference, config)
                run_dir.write_poses('poses.jsonl', poses, sigmas)
                return poses
            poses = self._stage('init_poses', run_dir, stage_init)

            schedule = chunk_schedule(sequence.num_frames, config)

            def stage_tracks():
                if sequence.tracksets:
                    tracksets = assign_chunks(schedule, sequence.tracksets)
                elif scene is not None:
                    tracksets = make_oracle_tracksets(scene, schedule, config, self.seed)
                else:
                    logger.warning("No tracks available; track losses contribute nothing")
                    tracksets = {}
                run_dir.write_tracks(tracksets)
                return tracksets
            tracksets = self._stage('tracks', run_dir, stage_tracks)

            def stage_optimize():
                if use_oracle:
                    timeline = copy.deepcopy(scene.timeline).requires_grad_(True)
                    model = build_scene_model(canonical, gaussians, keyframe, poses, config, self.seed,
                                              nodes=scene.nodes, timeline=timeline)
                else:
                    model = build_scene_model(canonical, gaussians, keyframe, poses, config, self.seed)
                result = optimize_4d(model, sequence.frames, sequence.masks, tracksets, schedule, config,
                                     checkpoint_dir=run_dir.path, seed=self.seed)
                run_dir.write_csv('history.csv', result.history)
                run_dir.write_timeline(result.timeline)
                run_dir.write_torch('delta_poses.pt', result.delta_poses.state_dict())
                save_control_nodes(model.nodes, run_dir.path_for('nodes.pt'))
                run_dir.write_poses('poses_refined.jsonl', model.refined_poses())
                if self.save_renders:
                    with torch.no_grad():
                        for k in range(model.num_frames):
                            save_render_png(model.render(k).detach(),
                                            run_dir.path_for(f"renders/{k:06d}.png"))
                self.state['model'] = model
                return result
            optimize_result = self._stage('optimize', run_dir, stage_optimize)

            metrics = None
            if scene is not None:
                def stage_evaluate():
                    model = self.state['model']
                    with torch.no_grad():
                        vertices = torch.stack([model.deformed_vertices(k).detach()
                                                for k in range(model.num_frames)])
                    model.clear_cache()
                    outputs = RunOutputs(model.refined_poses(), vertices, gaussians, canonical,
                                         time.perf_counter() - started)
                    report = evaluate(outputs, scene, config)
                    extra = {'loss_weights': config.loss_weights, 'seed': self.seed, 'scene': scene.params,
                             'stages': list(self.completed)}
                    if config.DETERMINISTIC:
                        extra['runtime_seconds'] = None
                    report.save_json(run_dir.path_for('metrics.json'), extra)
                    return report
                metrics = self._stage('evaluate', run_dir, stage_evaluate)

            run_dir.write_json('timing.json', {'total_seconds': time.perf_counter() - started, **self.timings})

        logger.info(f"Run complete: {self.run_dir_path}")
        return ExperimentResult(metrics, self.run_dir_path, list(self.completed), optimize_result,
                                self.state.get('pose_report', {}))


def run_experiment(config, run_dir: Optional[str] = None, seed: Optional[int] = None,
                   scene: Optional[SyntheticScene] = None, sequence: Optional[SequenceInput] = None,
                   oracle_init: bool = False) -> ExperimentResult:
    """
    Full pipeline into `run_dir` (default OUTPUT_DIR/run_seed<seed>)

    Raises StageError after writing failure_report.json; artifacts of the
    completed stages stay on disk.
    """
    seed = config.SEED if seed is None else seed
    run_dir = run_dir or config.get_output_path(f"run_seed{seed}")
    return ExperimentRunner(config, run_dir, seed, oracle_init).run(scene, sequence)


def _metrics_row(metrics: Optional[MetricsReport]) -> Dict[str, float]:
    if metrics is None:
        return {'pose_error_median_deg': math.nan, 'translation_error_mean': math.nan,
                'vertex_error_mean': math.nan, 'psnr_mean': math.nan, 'runtime_seconds': math.nan}
    return {'pose_error_median_deg': metrics.pose_error_median_deg,
            'translation_error_mean': metrics.translation_error_mean,
            'vertex_error_mean': metrics.vertex_error_mean, 'psnr_mean': metrics.psnr_mean,
            'runtime_seconds': metrics.runtime_seconds}


def run_ablation(config, seeds: Optional[Sequence[int]] = None, output_dir: Optional[str] = None,
                 variants: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Every ablation variant on every seed; writes ablation.csv

    A failed run is logged and recorded with NaN metrics.
    """
    seeds = list(config.ABLATION_SEEDS if seeds is None else seeds)
    output_dir = output_dir or config.get_output_path('ablation')
    variants = list(variants or ABLATION_VARIANTS)
    rows = []
    for seed in seeds:
        scene = make_scene(config.SCENE_NAME, config, seed=seed)
        for variant in variants:
            variant_config = config.copy(**ABLATION_VARIANTS[variant])
            try:
                result = run_experiment(variant_config, os.path.join(output_dir, f"{variant}_seed{seed}"),
                                        seed, scene=scene)
                metrics = result.metrics
            except StageError as e:
                logger.error(f"Ablation {variant} seed {seed} failed in {e.stage}: {e}")
                metrics = None
            rows.append({'variant': variant, 'seed': seed, **_metrics_row(metrics)})

    df = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    os.makedirs(output_dir, exist_ok=True)
    df.to_csv(os.path.join(output_dir, 'ablation.csv'), index=False, encoding='utf-8')
    summary = df.groupby('variant', sort=False)['vertex_error_mean'].mean()
    logger.info("Ablation mean vertex error: " + ', '.join(f"{v}={e:.4f}" for v, e in summary.items()))
    return df


def run_coverage_sweep(config, arcs: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None,
                       output_dir: Optional[str] = None) -> pd.DataFrame:
    """Full method over orbit arcs; writes coverage.csv and warns when PSNR spreads by 4 dB or more"""
    arcs = list(config.COVERAGE_ARCS if arcs is None else arcs)
    seeds = list([config.SEED] if seeds is None else seeds)
    output_dir = output_dir or config.get_output_path('coverage')
    rows = []
    for arc in arcs:
        for seed in seeds:
            arc_config = config.copy(ARC_DEGREES=float(arc))
            try:
                result = run_experiment(arc_config, os.path.join(output_dir, f"arc{int(arc):03d}_seed{seed}"), seed)
                metrics = _metrics_row(result.metrics)
            except StageError as e:
                logger.error(f"Coverage arc {arc} seed {seed} failed in {e.stage}: {e}")
                metrics = _metrics_row(None)
            rows.append({'arc_degrees': float(arc), 'seed': seed, 'psnr_mean': metrics['psnr_mean'],
                         'pose_error_median_deg': metrics['pose_error_median_deg'],
                         'vertex_error_mean': metrics['vertex_error_mean']})

    df = pd.DataFrame(rows, columns=COVERAGE_COLUMNS)
    os.makedirs(output_dir, exist_ok=True)
    df.to_csv(os.path.join(output_dir, 'coverage.csv'), index=False, encoding='utf-8')
    per_arc = df.groupby('arc_degrees')['psnr_mean'].mean()
    spread = float(per_arc.max() - per_arc.min()) if len(per_arc) else 0.0
    if spread >= 4.0:
        logger.warning(f"Held-out PSNR varies by {spread:.2f} dB across arcs")
    else:
        logger.info(f"Held-out PSNR spread across arcs: {spread:.2f} dB")
    return df
