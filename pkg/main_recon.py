#!/usr/bin/env python3
"""
Command-line entry point for the deformable reconstruction pipeline
Subcommands run single stages against a run directory or the whole pipeline
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import torch

from bench.experiment_runner import (build_scene_model, build_static_model, chunk_schedule, init_poses,
                                     make_oracle_tracksets, reference_pose, run_ablation, run_coverage_sweep,
                                     run_experiment, seed_everything, sequence_keyframe, train_regressor)
from bench.metrics import RunOutputs, evaluate
from bench.synthetic_scenes import SCENE_NAMES, make_scene
from config import ReconConfig, get_config
from data_processing.artifact_exporter import RunDirectory, export_sequence
from data_processing.sequence_loader import SequenceInput, load_sequence
from deformation.control_nodes import load_control_nodes, save_control_nodes
from deformation.skinning import deform_hybrid
from deformation.timeline import load_timeline
from exceptions import ReconstructionError, RunDirectoryLockedError, SequenceFormatError
from gaussians.splat_renderer import RenderSettings, render, save_render_png
from gaussians.surface_gaussians import SurfaceGaussianSet, attach_gaussians, export_gaussians_ply, realize
from geometry.mesh import TriMesh
from geometry.mesh_io import save_mesh
from optimization.optimize_4d import optimize_4d
from pose.pose_regressor import load_regressor, read_pose_jsonl, save_regressor
from tracking.chunk_schedule import assign_chunks
from utils.logging_setup import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_USAGE = 2

STAGE_COMMANDS = ('fit-static', 'train-pose', 'init-poses', 'optimize', 'evaluate', 'export')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Key-value config file applied on top of the environment')
    common.add_argument('--env', default='production', choices=['development', 'production', 'testing'],
                        help='Base configuration environment')
    common.add_argument('--seed', type=int, help='Override SEED')
    common.add_argument('--deterministic', action='store_true',
                        help='Deterministic kernels, single thread, seeded generators')
    common.add_argument('--json', action='store_true', help='Print a machine-readable result on stdout')
    common.add_argument('--log-file', help='Also log to this file')

    # shared options are accepted after the subcommand only
    parser = argparse.ArgumentParser(prog='main_recon.py',
                                     description='Deformable object reconstruction from monocular video')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[common], help='Generate a synthetic scene as a frame directory')
    synth.add_argument('--scene', choices=SCENE_NAMES, help='Scene name (default SCENE_NAME)')
    synth.add_argument('--frames', type=int, help='Number of frames')
    synth.add_argument('--arc', type=float, help='Camera orbit arc in degrees')
    synth.add_argument('--size', type=int, help='Image width and height')
    synth.add_argument('--amplitude', type=float, help='Deformation amplitude (0 = rigid)')
    synth.add_argument('--out', required=True, help='Output sequence directory')

    for name, text in [('fit-static', 'Fit the canonical Gaussian appearance on the keyframe'),
                       ('train-pose', 'Train the pose regressor on renders of the static model'),
                       ('init-poses', 'Predict initial per-frame poses'),
                       ('optimize', 'Joint 4D optimization of deformation and poses'),
                       ('evaluate', 'Score a run against the ground truth of a synthetic sequence')]:
        stage = sub.add_parser(name, parents=[common], help=text)
        stage.add_argument('--sequence', required=True, help='Frame directory')
        stage.add_argument('--run-dir', required=True, help='Run directory')

    run = sub.add_parser('run', parents=[common], help='Full pipeline')
    run.add_argument('--sequence', help='Frame directory (default: generate SCENE_NAME)')
    run.add_argument('--run-dir', help='Run directory (default OUTPUT_DIR/run_seed<seed>)')
    run.add_argument('--oracle-init', action='store_true',
                     help='Start from ground-truth poses and deformation (synthetic scenes only)')

    export = sub.add_parser('export', parents=[common], help='Per-frame meshes, Gaussian PLY and PNG renders')
    export.add_argument('--sequence', required=True, help='Frame directory')
    export.add_argument('--run-dir', required=True, help='Run directory')
    export.add_argument('--what', nargs='+', default=['mesh', 'ply', 'png'], choices=['mesh', 'ply', 'png'])

    ablation = sub.add_parser('ablation', parents=[common], help='Ablation table over seeds')
    ablation.add_argument('--out', help='Output directory (default OUTPUT_DIR/ablation)')

    coverage = sub.add_parser('coverage', parents=[common], help='Held-out quality over orbit arcs')
    coverage.add_argument('--out', help='Output directory (default OUTPUT_DIR/coverage)')
    coverage.add_argument('--arcs', type=float, nargs='+', help='Arcs in degrees (default COVERAGE_ARCS)')
    return parser


def build_config(args: argparse.Namespace) -> ReconConfig:
    config = ReconConfig.load(args.config, args.env) if args.config else get_config(args.env)
    if args.seed is not None:
        config.SEED = args.seed
    if args.deterministic:
        config.DETERMINISTIC = True
    return config


def require_mesh(sequence: SequenceInput) -> TriMesh:
    if sequence.mesh is None:
        raise SequenceFormatError(f"{sequence.path} has no canonical mesh (mesh.ply / mesh.obj)")
    return sequence.mesh


def load_static_model(run_dir: RunDirectory, canonical: TriMesh) -> SurfaceGaussianSet:
    if not run_dir.exists('static_model.pt'):
        raise ReconstructionError(f"No static_model.pt in {run_dir.path}; run fit-static first")
    gaussians = attach_gaussians(canonical)
    gaussians.load_state_dict(torch.load(run_dir.path_for('static_model.pt'), map_location='cpu'))
    gaussians.requires_grad_(False)
    return gaussians


def scene_for_sequence(sequence: SequenceInput, config: ReconConfig):
    """Regenerate the synthetic scene a harness-written sequence came from"""
    params = sequence.meta.get('scene')
    if not params:
        raise ReconstructionError(f"{sequence.path} carries no scene parameters; ground truth unavailable")
    orbit = sequence.meta.get('orbit', {})
    scene_config = config.copy(SCENE_NAME=params['scene'], NUM_FRAMES=params['num_frames'],
                               IMAGE_SIZE=params['image_size'], ARC_DEGREES=params['arc_degrees'],
                               DEFORMATION_AMPLITUDE=params['amplitude'], KEYFRAME=params['keyframe'],
                               NODE_COUNT=params['node_count'],
                               CAMERA_RADIUS=orbit.get('radius', config.CAMERA_RADIUS),
                               CAMERA_ELEVATION_DEGREES=orbit.get('elevation_degrees',
                                                                  config.CAMERA_ELEVATION_DEGREES))
    return make_scene(params['scene'], scene_config, seed=params['seed'])


def refined_vertices(run_dir: RunDirectory, canonical: TriMesh) -> torch.Tensor:
    nodes = load_control_nodes(run_dir.path_for('nodes.pt'))
    timeline = load_timeline(run_dir.path_for('timeline.bin'), canonical.vertices.dtype)
    with torch.no_grad():
        return torch.stack([deform_hybrid(nodes, timeline, k, canonical) for k in range(timeline.num_frames)])


def cmd_synth(args, config) -> Dict[str, Any]:
    overrides = {'SCENE_NAME': args.scene, 'NUM_FRAMES': args.frames, 'ARC_DEGREES': args.arc,
                 'IMAGE_SIZE': args.size, 'DEFORMATION_AMPLITUDE': args.amplitude}
    config = config.copy(**{k: v for k, v in overrides.items() if v is not None})
    scene = make_scene(config.SCENE_NAME, config, seed=config.SEED)
    tracksets = make_oracle_tracksets(scene, chunk_schedule(scene.num_frames, config), config, config.SEED)
    result = export_sequence(scene, args.out, tracksets)
    return {'directory': result['directory'], 'frames': result['frames'], 'keyframe': scene.keyframe,
            'track_files': len(result['track_files'])}


def cmd_fit_static(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence)
    canonical = require_mesh(sequence)
    keyframe = sequence_keyframe(sequence, config)
    with RunDirectory(args.run_dir) as run_dir:
        run_dir.write_config(config)
        gaussians, history = build_static_model(sequence, canonical, keyframe,
                                                reference_pose(sequence, canonical, config), config)
        run_dir.write_torch('static_model.pt', gaussians.state_dict())
        if len(history):
            run_dir.write_csv('static_history.csv', history)
        with torch.no_grad():
            export_gaussians_ply(realize(gaussians, canonical), run_dir.path_for('static_gaussians.ply'))
    return {'gaussians': len(gaussians), 'keyframe': keyframe,
            'final_rgb': float(history['rgb'].iloc[-1]) if len(history) else None}


def cmd_train_pose(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence)
    canonical = require_mesh(sequence)
    with RunDirectory(args.run_dir) as run_dir:
        gaussians = load_static_model(run_dir, canonical)
        regressor, history, report = train_regressor(gaussians, canonical, sequence, config, config.SEED)
        save_regressor(regressor, run_dir.path_for('regressor.pt'))
        run_dir.write_csv('pose_history.csv', history)
        run_dir.write_json('pose_regressor.json', report)
    return report


def cmd_init_poses(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence)
    canonical = require_mesh(sequence)
    keyframe = sequence_keyframe(sequence, config)
    with RunDirectory(args.run_dir) as run_dir:
        regressor = None
        if not config.ABLATION_NO_POSE_INIT:
            if not run_dir.exists('regressor.pt'):
                raise ReconstructionError(f"No regressor.pt in {run_dir.path}; run train-pose first")
            regressor = load_regressor(run_dir.path_for('regressor.pt'))
        poses, sigmas = init_poses(regressor, sequence, keyframe, reference_pose(sequence, canonical, config),
                                   config)
        path = run_dir.write_poses('poses.jsonl', poses, sigmas)
    return {'poses': path, 'frames': len(poses), 'mean_sigma': sum(sigmas) / max(len(sigmas), 1)}


def cmd_optimize(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence)
    canonical = require_mesh(sequence)
    keyframe = sequence_keyframe(sequence, config)
    schedule = chunk_schedule(sequence.num_frames, config)
    with RunDirectory(args.run_dir) as run_dir:
        gaussians = load_static_model(run_dir, canonical)
        if not run_dir.exists('poses.jsonl'):
            raise ReconstructionError(f"No poses.jsonl in {run_dir.path}; run init-poses first")
        poses, _ = read_pose_jsonl(run_dir.path_for('poses.jsonl'), sequence.intrinsics)
        tracksets = assign_chunks(schedule, sequence.tracksets)

        seed_everything(config.SEED, config.DETERMINISTIC)
        model = build_scene_model(canonical, gaussians, keyframe, poses, config, config.SEED)
        result = optimize_4d(model, sequence.frames, sequence.masks, tracksets, schedule, config,
                             checkpoint_dir=run_dir.path, seed=config.SEED)
        run_dir.write_csv('history.csv', result.history)
        run_dir.write_timeline(result.timeline)
        run_dir.write_torch('delta_poses.pt', result.delta_poses.state_dict())
        save_control_nodes(model.nodes, run_dir.path_for('nodes.pt'))
        run_dir.write_poses('poses_refined.jsonl', model.refined_poses())
    final = result.history.iloc[-1].to_dict() if len(result.history) else {}
    return {'steps': len(result.history), 'final_losses': final, 'skipped_groups': result.skipped_groups,
            'warnings': result.warnings}


def cmd_evaluate(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence)
    canonical = require_mesh(sequence)
    scene = scene_for_sequence(sequence, config)
    with RunDirectory(args.run_dir) as run_dir:
        gaussians = load_static_model(run_dir, canonical)
        poses, _ = read_pose_jsonl(run_dir.path_for('poses_refined.jsonl'), sequence.intrinsics)
        outputs = RunOutputs(poses, refined_vertices(run_dir, canonical), gaussians, canonical)
        report = evaluate(outputs, scene, config)
        extra = {'loss_weights': config.loss_weights, 'seed': config.SEED, 'scene': scene.params}
        if config.DETERMINISTIC:
            extra['runtime_seconds'] = None
        report.save_json(run_dir.path_for('metrics.json'), extra)
    return report.to_dict()


def cmd_run(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence) if args.sequence else None
    scene = None
    if sequence is not None and sequence.meta.get('scene'):
        # harness-written sequence: ground truth is regenerated for the evaluate stage
        scene = scene_for_sequence(sequence, config)
    result = run_experiment(config, args.run_dir, config.SEED, scene=scene, sequence=sequence,
                            oracle_init=args.oracle_init)
    summary = {'run_dir': result.run_dir, 'stages': result.completed}
    if result.metrics is not None:
        summary['metrics'] = result.metrics.to_dict()
    return summary


def cmd_export(args, config) -> Dict[str, Any]:
    sequence = load_sequence(args.sequence)
    canonical = require_mesh(sequence)
    settings = RenderSettings.from_config(config)
    written: List[str] = []
    with RunDirectory(args.run_dir) as run_dir:
        gaussians = load_static_model(run_dir, canonical)
        vertices = refined_vertices(run_dir, canonical)
        poses, _ = read_pose_jsonl(run_dir.path_for('poses_refined.jsonl'), sequence.intrinsics)
        with torch.no_grad():
            for k in range(vertices.shape[0]):
                mesh = canonical.with_vertices(vertices[k])
                if 'mesh' in args.what:
                    written.append(save_mesh(mesh, run_dir.path_for(f"export/mesh_{k:06d}.ply")))
                if 'ply' in args.what:
                    written.append(export_gaussians_ply(realize(gaussians, mesh),
                                                        run_dir.path_for(f"export/gaussians_{k:06d}.ply")))
                if 'png' in args.what:
                    path = run_dir.path_for(f"export/render_{k:06d}.png")
                    save_render_png(render(realize(gaussians, mesh), poses[k], settings), path)
                    written.append(path)
    return {'files': len(written), 'directory': os.path.join(args.run_dir, 'export')}


def cmd_ablation(args, config) -> Dict[str, Any]:
    df = run_ablation(config, output_dir=args.out)
    return {'rows': df.to_dict(orient='records')}


def cmd_coverage(args, config) -> Dict[str, Any]:
    df = run_coverage_sweep(config, arcs=args.arcs, output_dir=args.out)
    return {'rows': df.to_dict(orient='records')}


COMMANDS = {
    'synth': cmd_synth,
    'fit-static': cmd_fit_static,
    'train-pose': cmd_train_pose,
    'init-poses': cmd_init_poses,
    'optimize': cmd_optimize,
    'evaluate': cmd_evaluate,
    'run': cmd_run,
    'export': cmd_export,
    'ablation': cmd_ablation,
    'coverage': cmd_coverage,
}


def record_failure(args: argparse.Namespace, error: BaseException):
    """Leave failure_report.json in the run directory of a failed single-stage command"""
    if args.command not in STAGE_COMMANDS or isinstance(error, RunDirectoryLockedError):
        return
    try:
        with RunDirectory(args.run_dir) as run_dir:
            run_dir.write_failure_report(args.command, error, [])
    except (ReconstructionError, OSError) as e:
        logger.warning(f"Could not write failure report: {e}")


def _emit(result: Dict[str, Any], as_json: bool):
    if as_json:
        print(json.dumps(result, sort_keys=True, default=str))
        return
    for key, value in result.items():
        print(f"{key}: {value}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        config = build_config(args)
    except ReconstructionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(config.LOG_LEVEL, args.log_file)
    seed_everything(config.SEED, config.DETERMINISTIC)
    logger.info(f"{args.command}: env {args.env}, seed {config.SEED}"
                f"{', deterministic' if config.DETERMINISTIC else ''}")

    try:
        result = COMMANDS[args.command](args, config)
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        record_failure(args, e)
        if args.json:
            _emit({'error': str(e), 'error_type': type(e).__name__}, True)
        return EXIT_STAGE_FAILURE

    _emit(result, args.json)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
