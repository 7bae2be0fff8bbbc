#!/usr/bin/env python3
"""
Tests for the pose regressor, pose sampling, augmentation and delta poses
"""

import math

import numpy as np
import pytest
import torch

from conftest import random_rotation
from gaussians.surface_gaussians import realize
from geometry.camera import CameraPose, Intrinsics, look_at, project
from geometry.quaternion import matrix_to_quat, quat_from_axis_angle
from pose.augment import (AugmentSettings, augment, occlusion_box, rotate_image, rotate_pixels,
                          rotate_pose_label)
from pose.delta_pose import DeltaPoseMLP, DeltaPoseTable, build_delta_poses, compose_delta
from pose.pose_regressor import (PoseBatchMaker, PosePrediction, PoseRegressor, evaluate_pose_regressor,
                                 initialize_video_poses, load_regressor, pose_loss, read_pose_jsonl,
                                 save_regressor, train_pose_regressor, write_pose_jsonl)
from pose.pose_sampler import PoseSample, sample_pose

INTRINSICS = Intrinsics(32.0, 15.5, 15.5, 32, 32)


class TestPoseLoss:
    def test_zero_at_the_truth(self):
        R = torch.tensor(np.stack([random_rotation(np.random.default_rng(s)) for s in range(3)]))
        q = matrix_to_quat(R)
        t = torch.tensor([[0.0, 0.0, 4.0]] * 3, dtype=torch.float64)
        pred = PosePrediction(q, t.clone(), torch.zeros(3, dtype=torch.float64))
        losses = pose_loss(pred, R, t)
        assert float(losses.rotation) < 1e-6
        assert float(losses.translation) == 0.0
        assert float(losses.total) < 1e-6

    def test_known_errors(self):
        q = quat_from_axis_angle([1.0, 0.0, 0.0], 0.5)[None]
        pred = PosePrediction(q, torch.tensor([[1.0, 0.0, 4.0]], dtype=torch.float64),
                              torch.tensor([0.25], dtype=torch.float64))
        losses = pose_loss(pred, torch.eye(3, dtype=torch.float64)[None],
                           torch.tensor([[0.0, 0.0, 4.0]], dtype=torch.float64),
                           lambda_rot=1.0, lambda_trans=2.0, lambda_unc=0.5)
        assert float(losses.rotation) == pytest.approx(0.5)
        assert float(losses.translation) == pytest.approx(1.0)
        assert float(losses.uncertainty) == pytest.approx((0.25 - 1.5) ** 2)
        assert float(losses.total) == pytest.approx(0.5 + 2.0 + 0.5 * 1.25 ** 2)

    def test_rotation_gradient_is_finite_at_zero_error(self):
        q = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64, requires_grad=True)
        pred = PosePrediction(q, torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        loss = pose_loss(pred, torch.eye(3, dtype=torch.float64)[None], torch.zeros(1, 3, dtype=torch.float64))
        loss.total.backward()
        assert torch.isfinite(q.grad).all()


class TestPoseRegressor:
    def test_output_shapes_and_ranges(self):
        torch.manual_seed(0)
        regressor = PoseRegressor(feature_dim=32, input_size=32)
        pred = regressor(torch.rand(2, 40, 40, 3))
        assert pred.quaternion.shape == (2, 4)
        assert pred.translation.shape == (2, 3)
        assert pred.sigma.shape == (2,)
        assert torch.allclose(pred.quaternion.norm(dim=-1), torch.ones(2), atol=1e-5)
        assert bool((pred.quaternion[:, 0] >= 0).all())
        assert bool((pred.sigma >= 0).all())

    def test_precomputed_features(self):
        regressor = PoseRegressor(feature_dim=32, input_size=32, translation_prior=(0.0, 0.0, 5.0))
        pred = regressor(features=torch.zeros(3, 32))
        assert pred.translation.shape == (3, 3)
        with pytest.raises(ValueError):
            regressor()

    def test_save_and_load(self, tmp_path):
        torch.manual_seed(1)
        regressor = PoseRegressor(feature_dim=32, input_size=32).eval()
        images = torch.rand(2, 32, 32, 3)
        loaded = load_regressor(save_regressor(regressor, str(tmp_path / 'regressor.pt')))
        with torch.no_grad():
            assert torch.allclose(loaded(images).quaternion, regressor(images).quaternion)

    def test_version_mismatch(self, tmp_path):
        path = str(tmp_path / 'regressor.pt')
        save_regressor(PoseRegressor(feature_dim=32, input_size=32), path)
        checkpoint = torch.load(path, map_location='cpu')
        checkpoint['format_version'] = 99
        torch.save(checkpoint, path)
        with pytest.raises(ValueError):
            load_regressor(path)

    def test_training_smoke(self, bar_scene, small_config):
        world = realize(bar_scene.gaussians, bar_scene.canonical)
        config = small_config.copy(POSE_ITERATIONS=3, POSE_FEATURE_DIM=32)
        regressor, history = train_pose_regressor(world, bar_scene.intrinsics, config, seed=0,
                                                  centroid=bar_scene.center.tolist())
        assert len(history) == 3
        assert list(history.columns) == ['step', 'total', 'rotation', 'translation', 'uncertainty']
        assert np.isfinite(history['total']).all()

        report = evaluate_pose_regressor(regressor, world, bar_scene.intrinsics, config, samples=2,
                                         centroid=bar_scene.center.tolist())
        assert report['samples'] == 2
        assert 0.0 <= report['rotation_error_median_deg'] <= 180.0

        poses, sigmas = initialize_video_poses(regressor, bar_scene.frames.float(), bar_scene.intrinsics)
        assert len(poses) == len(sigmas) == bar_scene.num_frames
        assert poses[0].intrinsics == bar_scene.intrinsics

    def test_training_with_background_renderer(self, bar_scene, small_config):
        world = realize(bar_scene.gaussians, bar_scene.canonical)
        config = small_config.copy(POSE_ITERATIONS=2, POSE_FEATURE_DIM=32, POSE_PREFETCH=2)
        _, history = train_pose_regressor(world, bar_scene.intrinsics, config, seed=0)
        assert history['step'].tolist() == [0, 1]

    def test_pose_jsonl_round_trip(self, tmp_path):
        poses = [look_at([0.0, 1.0, 4.0], [0.0, 0.0, 0.0], INTRINSICS),
                 look_at([2.0, 0.5, 3.0], [0.0, 0.0, 0.0], INTRINSICS, roll=0.2)]
        path = write_pose_jsonl(str(tmp_path / 'poses.jsonl'), poses, [0.1, 0.2])
        loaded, sigmas = read_pose_jsonl(path, INTRINSICS)
        assert sigmas == pytest.approx([0.1, 0.2])
        for a, b in zip(poses, loaded):
            assert torch.allclose(a.rotation_matrix(), b.rotation_matrix(), atol=1e-12)
            assert torch.allclose(a.translation, b.translation, atol=1e-12)


class TestPoseSampler:
    def test_samples_look_at_the_centroid(self, testing_config):
        rng = np.random.default_rng(0)
        centroid = torch.tensor([0.1, 0.2, -0.3], dtype=torch.float64)
        for _ in range(10):
            pose = sample_pose(rng, testing_config, INTRINSICS, centroid.tolist())
            pixel, depth, valid = project(pose, centroid[None])
            assert bool(valid[0])
            assert torch.allclose(pixel[0], torch.tensor([15.5, 15.5], dtype=torch.float64), atol=1e-9)
            radius = float((pose.camera_center() - centroid).norm())
            assert testing_config.POSE_RADIUS_MIN - 1e-9 <= radius <= testing_config.POSE_RADIUS_MAX + 1e-9

    def test_same_seed_same_poses(self, testing_config):
        a = sample_pose(np.random.default_rng(3), testing_config, INTRINSICS)
        b = sample_pose(np.random.default_rng(3), testing_config, INTRINSICS)
        assert torch.equal(a.rotation, b.rotation)

    def test_batch_maker_renders_labelled_samples(self, bar_scene, small_config):
        world = realize(bar_scene.gaussians, bar_scene.canonical)
        make_batch = PoseBatchMaker(world, bar_scene.intrinsics, small_config, np.random.default_rng(0),
                                    centroid=bar_scene.center.tolist())
        sample = make_batch.sample()
        assert isinstance(sample, PoseSample)
        size = bar_scene.intrinsics.height, bar_scene.intrinsics.width
        assert sample.image.shape == (*size, 3)
        assert sample.pose.intrinsics == bar_scene.intrinsics
        images, rotations, translations = make_batch(2)
        assert images.shape == (2, *size, 3)
        assert rotations.shape == (2, 3, 3)
        assert translations.shape == (2, 3)


class TestAugment:
    def test_rotated_label_matches_rotated_pixels(self):
        pose = look_at([1.0, 1.5, 3.5], [0.0, 0.0, 0.0], INTRINSICS)
        points = torch.tensor([[0.3, -0.2, 0.1], [-0.4, 0.5, 0.2]], dtype=torch.float64)
        angle = math.radians(8.0)
        pixels, _, _ = project(pose, points)
        rotated, _, _ = project(rotate_pose_label(pose, angle), points)
        assert torch.allclose(rotated, rotate_pixels(pixels, angle, INTRINSICS.cx, INTRINSICS.cy), atol=1e-9)

    def test_zero_rotation_keeps_the_image(self):
        image = torch.rand(20, 24, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        assert torch.allclose(rotate_image(image, 0.0, 11.5, 9.5), image, atol=1e-9)

    def test_occlusion_box_respects_the_budget(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            x0, y0, w, h = occlusion_box(rng, 32, 40, 0.2)
            assert w * h <= math.floor(0.2 * 32 * 40)
            assert 0 <= x0 and x0 + w <= 40
            assert 0 <= y0 and y0 + h <= 32

    def test_disabled_settings_return_the_input(self):
        image = torch.rand(16, 16, 3)
        result = augment(image, np.random.default_rng(0), AugmentSettings(enabled=False), (7.5, 7.5))
        assert result.image is image
        assert result.rotation == 0.0
        assert result.occlusion is None

    def test_augment_stays_in_range(self):
        image = torch.rand(16, 16, 3, dtype=torch.float64)
        result = augment(image, np.random.default_rng(1), AugmentSettings(), (7.5, 7.5))
        assert result.image.shape == image.shape
        assert float(result.image.min()) >= 0.0
        assert float(result.image.max()) <= 1.0 + 1e-9
        assert abs(math.degrees(result.rotation)) <= 10.0


class TestDeltaPoses:
    @pytest.mark.parametrize('kind', ['table', 'mlp'])
    def test_initial_deltas_are_zero(self, kind):
        deltas = build_delta_poses(kind, 5, keyframe=2)
        pose = look_at([0.0, 1.0, 4.0], [0.0, 0.0, 0.0], INTRINSICS)
        composed = deltas.compose(3, pose)
        assert torch.allclose(composed.rotation_matrix(), pose.rotation_matrix(), atol=1e-12)
        assert torch.allclose(composed.translation, pose.translation, atol=1e-12)
        assert deltas.table().shape == (5, 6)

    def test_keyframe_delta_is_pinned(self):
        table = DeltaPoseTable(4, keyframe=1)
        with torch.no_grad():
            table.deltas.fill_(0.3)
        assert float(table.delta(1).abs().sum()) == 0.0
        assert float(table.table()[1].abs().sum()) == 0.0
        assert float(table.delta(0).abs().sum()) == pytest.approx(1.8)

        mlp = DeltaPoseMLP(4, keyframe=1)
        with torch.no_grad():
            mlp.net[-1].bias.fill_(0.3)
        assert float(mlp.delta(1).abs().sum()) == 0.0

    def test_compose_translation_only(self):
        pose = CameraPose.identity(INTRINSICS)
        delta = torch.tensor([0.0, 0.0, 0.0, 0.1, -0.2, 0.3], dtype=torch.float64)
        composed = compose_delta(delta, pose)
        assert torch.allclose(composed.translation, delta[3:])

    def test_compose_gradient_reaches_delta(self):
        delta = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        pose = look_at([0.0, 1.0, 4.0], [0.0, 0.0, 0.0], INTRINSICS)
        pixels, _, _ = project(compose_delta(delta, pose), torch.tensor([[0.2, 0.1, 0.0]], dtype=torch.float64))
        pixels.sum().backward()
        assert torch.isfinite(delta.grad).all()
        assert float(delta.grad.abs().sum()) > 0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            build_delta_poses('spline', 3, 0)
