#!/usr/bin/env python3
"""
Tests for configuration, validation, the frame-directory format and the CLI
"""

import json
import logging
import os
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from PIL import Image

import main_recon
from config import ReconConfig, TestingConfig, get_config
from data_processing.artifact_exporter import export_sequence, write_png
from data_processing.sequence_loader import load_sequence
from exceptions import ConfigError, SequenceFormatError
from geometry.camera import Intrinsics
from tracking.chunk_schedule import keyframe_chunk
from tracking.oracle_tracks import oracle_tracks
from utils.data_validator import DataValidator


@pytest.fixture(autouse=True)
def restore_root_logger():
    """main() installs its own handlers on the root logger"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def write_frames(directory, sizes, masks=True):
    os.makedirs(directory, exist_ok=True)
    for index, (width, height) in enumerate(sizes):
        image = np.zeros((height, width, 3), dtype=np.uint8)
        image[height // 4:height // 2, width // 4:width // 2] = 200
        Image.fromarray(image).save(os.path.join(directory, f"{index:06d}.png"))
        if masks:
            write_png(os.path.join(directory, 'masks', f"{index:06d}.png"), image[..., 0] > 0)


class TestConfig:
    def test_environments(self):
        assert isinstance(get_config('testing'), TestingConfig)
        assert get_config('development').LOG_LEVEL == 'DEBUG'
        assert type(get_config('unknown')).__name__ == 'ProductionConfig'

    def test_load_key_value_file(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text("# overrides\n"
                        "OPTIMIZE_ITERATIONS = 7\n"
                        "LAMBDA_TRACK = 0.25  # inline comment\n"
                        "scene-name = quad-walker\n"
                        "HELDOUT_AZIMUTHS = [10, 20]\n"
                        "AUGMENT = false\n", encoding='utf-8')
        config = ReconConfig.load(str(path), 'testing')
        assert isinstance(config, TestingConfig)
        assert config.OPTIMIZE_ITERATIONS == 7
        assert config.LAMBDA_TRACK == 0.25
        assert config.SCENE_NAME == 'quad-walker'
        assert config.HELDOUT_AZIMUTHS == [10, 20]
        assert config.AUGMENT is False
        assert config.NUM_FRAMES == TestingConfig.NUM_FRAMES

    def test_unknown_key_names_the_line(self, tmp_path):
        path = tmp_path / 'bad.cfg'
        path.write_text("SEED = 1\n\nNOT_A_KEY = 3\n", encoding='utf-8')
        with pytest.raises(ConfigError, match=':3:'):
            ReconConfig.load(str(path))

    def test_malformed_line_and_missing_file(self, tmp_path):
        path = tmp_path / 'bad.cfg'
        path.write_text("SEED 1\n", encoding='utf-8')
        with pytest.raises(ConfigError):
            ReconConfig.load(str(path))
        with pytest.raises(ConfigError):
            ReconConfig.load(str(tmp_path / 'missing.cfg'))

    def test_snapshot_round_trip(self, tmp_path):
        config = get_config('testing').copy(SEED=9, COVERAGE_ARCS=[0.0, 45.0], SCENE_NAME='swing-ellipsoid')
        loaded = ReconConfig.load(config.snapshot(str(tmp_path / 'config.snapshot')))
        assert loaded.to_dict() == config.to_dict()

    def test_copy_keeps_the_original(self):
        config = get_config('testing')
        clone = config.copy(SEED=3)
        assert isinstance(clone, TestingConfig)
        assert (config.SEED, clone.SEED) == (0, 3)
        with pytest.raises(ConfigError):
            config.copy(UNKNOWN=1)

    def test_ablation_flags_drive_loss_weights(self):
        weights = get_config('testing').copy(ABLATION_NO_MULTI_TRACK=True).loss_weights
        assert weights['multi'] == 0.0
        assert weights['track'] == TestingConfig.LAMBDA_TRACK


class TestDataValidator:
    def test_non_manifold_mesh(self):
        mesh = SimpleNamespace(vertices=np.random.default_rng(0).normal(size=(5, 3)),
                               faces=np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]]))
        is_valid, errors = DataValidator().validate(mesh, 'mesh')
        assert not is_valid
        assert any('more than two faces' in e for e in errors)

    def test_out_of_range_faces(self):
        mesh = SimpleNamespace(vertices=np.zeros((3, 3)), faces=np.array([[0, 1, 3]]))
        assert not DataValidator().validate(mesh, 'mesh')[0]

    def test_intrinsics_dict(self):
        validator = DataValidator()
        assert validator.validate(Intrinsics.default_for(32, 32).to_dict(), 'intrinsics') == (True, [])
        is_valid, errors = validator.validate({'focal': -1, 'cx': 0, 'cy': 0, 'width': 8, 'height': 32},
                                              'intrinsics')
        assert not is_valid
        assert len(errors) == 2
        assert validator.validate({'focal': 1.0}, 'intrinsics')[0] is False

    def test_empty_pose_list(self):
        assert DataValidator().validate([], 'poses') == (False, ['Pose list is empty'])

    def test_track_quality(self, bar_scene):
        tracks = oracle_tracks(bar_scene, keyframe_chunk(bar_scene.keyframe), num_points=8, seed=0)
        quality = DataValidator().calculate_track_quality(tracks)
        assert 0.0 < quality <= 1.0


class TestSequenceFormat:
    def test_export_and_load(self, bar_scene, tmp_path):
        chunk = keyframe_chunk(bar_scene.keyframe)
        tracks = oracle_tracks(bar_scene, chunk, num_points=8, seed=0)
        directory = str(tmp_path / 'seq')
        export_sequence(bar_scene, directory, {chunk: tracks})

        sequence = load_sequence(directory)
        assert sequence.num_frames == bar_scene.num_frames
        assert torch.allclose(sequence.frames, bar_scene.frames, atol=0.5 / 255 + 1e-9)
        assert torch.equal(sequence.masks, bar_scene.masks)
        assert sequence.intrinsics == bar_scene.intrinsics
        assert sequence.keyframe == bar_scene.keyframe
        assert sequence.meta['scene'] == bar_scene.params
        assert sequence.mesh.num_vertices == bar_scene.canonical.num_vertices
        assert torch.allclose(sequence.mesh.vertices, bar_scene.canonical.vertices, atol=1e-6)
        assert len(sequence.tracksets) == 1
        assert torch.equal(sequence.tracksets[0].visibility, tracks.visibility)
        assert os.path.exists(os.path.join(directory, 'ground_truth', 'vertices.npy'))

    def test_missing_masks_and_meta_fall_back(self, tmp_path, caplog):
        write_frames(str(tmp_path), [(32, 32), (32, 32)], masks=False)
        with caplog.at_level(logging.WARNING):
            sequence = load_sequence(str(tmp_path))
        assert sequence.intrinsics == Intrinsics.default_for(32, 32)
        assert int(sequence.masks[0].sum()) == 16 * 16 // 4
        assert sequence.mesh is None
        assert sequence.keyframe is None
        assert 'deriving masks' in caplog.text

    def test_missing_directory(self, tmp_path):
        with pytest.raises(SequenceFormatError):
            load_sequence(str(tmp_path / 'nope'))
        with pytest.raises(SequenceFormatError):
            load_sequence(str(tmp_path))

    def test_resolution_mismatch(self, tmp_path):
        write_frames(str(tmp_path), [(32, 32), (24, 32)])
        with pytest.raises(SequenceFormatError, match='expected 32x32'):
            load_sequence(str(tmp_path))

    def test_missing_mask_file(self, tmp_path):
        write_frames(str(tmp_path), [(32, 32), (32, 32)])
        os.remove(tmp_path / 'masks' / '000001.png')
        with pytest.raises(SequenceFormatError, match='Mask missing'):
            load_sequence(str(tmp_path))

    def test_single_frame_is_rejected(self, tmp_path):
        write_frames(str(tmp_path), [(32, 32)])
        with pytest.raises(SequenceFormatError, match='at least 2 frames'):
            load_sequence(str(tmp_path))

    def test_keyframe_out_of_range(self, tmp_path):
        write_frames(str(tmp_path), [(32, 32), (32, 32)])
        (tmp_path / 'meta.json').write_text(json.dumps({'keyframe': 5}), encoding='utf-8')
        with pytest.raises(SequenceFormatError, match='Keyframe 5'):
            load_sequence(str(tmp_path))


class TestCli:
    def test_usage_errors(self):
        assert main_recon.main(['bogus']) == main_recon.EXIT_USAGE
        assert main_recon.main([]) == main_recon.EXIT_USAGE
        assert main_recon.main(['synth', '--help']) == main_recon.EXIT_OK

    def test_shared_flags_after_the_subcommand(self, tmp_path):
        args = main_recon.build_parser().parse_args(['synth', '--env', 'testing', '--seed', '5', '--deterministic',
                                                     '--out', str(tmp_path)])
        config = main_recon.build_config(args)
        assert isinstance(config, TestingConfig)
        assert config.SEED == 5
        assert config.DETERMINISTIC is True

    def test_bad_config_file_is_a_usage_error(self, tmp_path):
        path = tmp_path / 'bad.cfg'
        path.write_text("NOT_A_KEY = 1\n", encoding='utf-8')
        code = main_recon.main(['synth', '--config', str(path), '--out', str(tmp_path / 'seq')])
        assert code == main_recon.EXIT_USAGE

    def test_synth_writes_a_sequence(self, tmp_path, capsys):
        out = str(tmp_path / 'seq')
        code = main_recon.main(['synth', '--env', 'testing', '--frames', '3', '--size', '32', '--json', '--out', out])
        assert code == main_recon.EXIT_OK
        result = json.loads(capsys.readouterr().out)
        assert result['frames'] == 3
        assert result['keyframe'] == 1
        assert result['track_files'] == 3
        assert sorted(n for n in os.listdir(out) if n.endswith('.png')) == ['000000.png', '000001.png', '000002.png']
        assert load_sequence(out).num_frames == 3

    def test_stage_without_prerequisites_fails(self, bar_scene, tmp_path, capsys):
        directory = str(tmp_path / 'seq')
        export_sequence(bar_scene, directory)
        code = main_recon.main(['optimize', '--env', 'testing', '--json', '--sequence', directory,
                                '--run-dir', str(tmp_path / 'run')])
        assert code == main_recon.EXIT_STAGE_FAILURE
        result = json.loads(capsys.readouterr().out)
        assert result['error_type'] == 'ReconstructionError'
        assert 'fit-static' in result['error']

    def test_evaluate_without_mesh_fails(self, tmp_path, capsys):
        write_frames(str(tmp_path / 'seq'), [(32, 32), (32, 32)])
        code = main_recon.main(['evaluate', '--env', 'testing', '--json', '--sequence', str(tmp_path / 'seq'),
                                '--run-dir', str(tmp_path / 'run')])
        assert code == main_recon.EXIT_STAGE_FAILURE
        assert json.loads(capsys.readouterr().out)['error_type'] == 'SequenceFormatError'

    def test_unexpected_error_exits_with_stage_failure(self, tmp_path, capsys, monkeypatch):
        def broken(args, config):
            raise RuntimeError('CUDA out of memory')
        monkeypatch.setitem(main_recon.COMMANDS, 'fit-static', broken)
        run_dir = tmp_path / 'run'
        code = main_recon.main(['fit-static', '--env', 'testing', '--json', '--sequence', str(tmp_path / 'seq'),
                                '--run-dir', str(run_dir)])
        assert code == main_recon.EXIT_STAGE_FAILURE
        result = json.loads(capsys.readouterr().out)
        assert result == {'error': 'CUDA out of memory', 'error_type': 'RuntimeError'}
        with open(run_dir / 'failure_report.json', 'r', encoding='utf-8') as f:
            report = json.load(f)
        assert report['failed_stage'] == 'fit-static'
        assert report['error_type'] == 'RuntimeError'
        assert not (run_dir / '.lock').exists()
