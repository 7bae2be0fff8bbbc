#!/usr/bin/env python3
"""
Tests for control nodes, hybrid skinning and deformation timelines
"""

import numpy as np
import pytest
import torch

from conftest import grid_mesh, icosphere, random_rotation
from deformation.control_nodes import (ControlNodeSet, default_node_count, farthest_point_sampling,
                                       load_control_nodes, sample_control_nodes, save_control_nodes)
from deformation.skinning import (NodeTransforms, SkinningStats, blend_dqs, blend_hybrid, blend_lbs,
                                  deform_dqs, deform_hybrid, deform_lbs, vertex_rigidity)
from deformation.timeline import (DeformationMLP, DeformationTimeline, build_timeline, load_timeline,
                                  save_timeline)
from exceptions import CheckpointFormatError
from geometry.quaternion import matrix_to_quat, quat_from_axis_angle


@pytest.fixture(scope='module')
def sphere():
    return icosphere(2)


@pytest.fixture(scope='module')
def nodes(sphere):
    return sample_control_nodes(sphere, 16, seed=0)


def global_rigid(nodes: ControlNodeSet, R: torch.Tensor, T: torch.Tensor, rigidity: float) -> NodeTransforms:
    """Node transforms that move the whole mesh by x -> R x + T"""
    m = nodes.num_nodes
    p = nodes.rest_positions
    transforms = NodeTransforms.identity(m, torch.full((m,), rigidity, dtype=torch.float64))
    transforms.rotations = matrix_to_quat(R).expand(m, 4).clone()
    transforms.translations = T + p @ R.T - p
    return transforms


class TestControlNodes:
    def test_default_node_count(self):
        assert default_node_count(10) == 10
        assert default_node_count(500) == 16
        assert default_node_count(5000) == 100

    def test_sampling_is_deterministic(self, sphere):
        points = sphere.vertices.numpy()
        assert np.array_equal(farthest_point_sampling(points, 12, seed=4),
                              farthest_point_sampling(points, 12, seed=4))
        assert len(set(farthest_point_sampling(points, 12, seed=4).tolist())) == 12

    def test_weights_are_a_partition_of_unity(self, nodes, sphere):
        assert nodes.neighbor_ids.shape == (sphere.num_vertices, 4)
        assert bool((nodes.neighbor_weights >= 0).all())
        assert torch.allclose(nodes.neighbor_weights.sum(dim=1), torch.ones(sphere.num_vertices, dtype=torch.float64))
        assert nodes.bandwidth > 0
        assert torch.allclose(nodes.rest_positions, sphere.vertices[nodes.vertex_ids])

    def test_node_count_bounds(self, sphere):
        with pytest.raises(ValueError):
            sample_control_nodes(sphere, 3)
        with pytest.raises(ValueError):
            sample_control_nodes(sphere, sphere.num_vertices + 1)

    def test_save_and_load(self, nodes, tmp_path):
        loaded = load_control_nodes(save_control_nodes(nodes, str(tmp_path / 'nodes.pt')))
        assert torch.equal(loaded.neighbor_ids, nodes.neighbor_ids)
        assert torch.equal(loaded.neighbor_weights, nodes.neighbor_weights)
        assert loaded.bandwidth == nodes.bandwidth


class TestSkinning:
    @pytest.mark.parametrize('blend', [blend_lbs, blend_dqs, blend_hybrid])
    def test_global_rigid_motion_is_reproduced(self, blend, nodes, sphere):
        R = torch.tensor(random_rotation(np.random.default_rng(7)))
        T = torch.tensor([0.4, -0.3, 1.5], dtype=torch.float64)
        moved = blend(nodes, global_rigid(nodes, R, T, 0.5), sphere.vertices)
        assert torch.allclose(moved, sphere.vertices @ R.T + T, atol=1e-9)

    def test_single_node_dqs_is_exact(self):
        mesh = grid_mesh(3)
        v = mesh.num_vertices
        single = ControlNodeSet(vertex_ids=torch.tensor([4]),
                                rest_positions=mesh.vertices[4:5].clone(),
                                neighbor_ids=torch.zeros(v, 1, dtype=torch.long),
                                neighbor_weights=torch.ones(v, 1, dtype=torch.float64),
                                bandwidth=1.0)
        q = quat_from_axis_angle([0.0, 1.0, 0.0], 1.1)
        transforms = NodeTransforms.identity(1)
        transforms.rotations = q[None]
        transforms.translations = torch.tensor([[0.0, 0.5, 0.0]], dtype=torch.float64)

        moved = blend_dqs(single, transforms, mesh.vertices)
        R = transforms.rotation_matrices()[0]
        p = mesh.vertices[4]
        expected = (mesh.vertices - p) @ R.T + p + transforms.translations[0]
        assert torch.allclose(moved, expected, atol=1e-12)

    def test_rigidity_limits_match_pure_branches(self, nodes, sphere):
        gen = torch.Generator().manual_seed(0)
        m = nodes.num_nodes
        transforms = NodeTransforms.identity(m)
        transforms.rotations = transforms.rotations + 0.3 * torch.randn(m, 4, generator=gen, dtype=torch.float64)
        transforms.shears = transforms.shears + 0.05 * torch.randn(m, 6, generator=gen, dtype=torch.float64)
        transforms.translations = 0.2 * torch.randn(m, 3, generator=gen, dtype=torch.float64)

        transforms.rigidity = torch.zeros(m, dtype=torch.float64)
        assert torch.equal(blend_hybrid(nodes, transforms, sphere.vertices),
                           blend_lbs(nodes, transforms, sphere.vertices))
        transforms.rigidity = torch.ones(m, dtype=torch.float64)
        assert torch.equal(blend_hybrid(nodes, transforms, sphere.vertices),
                           blend_dqs(nodes, transforms, sphere.vertices))

    def test_vertex_rigidity_is_weighted_average(self, nodes):
        rigidity = torch.linspace(0.0, 1.0, nodes.num_nodes, dtype=torch.float64)
        rho = vertex_rigidity(nodes, rigidity)
        assert bool((rho >= 0).all()) and bool((rho <= 1).all())
        assert torch.allclose(vertex_rigidity(nodes, torch.full_like(rigidity, 0.3)),
                              torch.full_like(rho, 0.3))

    def test_keyframe_returns_canonical_vertices(self, nodes, sphere):
        timeline = DeformationTimeline(5, nodes.num_nodes, keyframe=2)
        with torch.no_grad():
            timeline.translations.add_(1.0)
        assert deform_hybrid(nodes, timeline, 2, sphere) is sphere.vertices
        assert not torch.allclose(deform_hybrid(nodes, timeline, 1, sphere), sphere.vertices)

    @pytest.mark.parametrize('deform', [deform_lbs, deform_dqs, deform_hybrid])
    def test_timeline_frame_applies_node_transforms(self, deform, nodes, sphere):
        R = torch.tensor(random_rotation(np.random.default_rng(3)))
        T = torch.tensor([-0.2, 0.1, 0.6], dtype=torch.float64)
        timeline = DeformationTimeline(3, nodes.num_nodes, keyframe=0)
        timeline.load_transforms(1, global_rigid(nodes, R, T, 0.5))
        assert deform(nodes, timeline, 0, sphere) is sphere.vertices
        assert torch.allclose(deform(nodes, timeline, 1, sphere).detach(), sphere.vertices @ R.T + T, atol=1e-9)

    def test_stats_are_counted(self, nodes, sphere):
        timeline = DeformationTimeline(3, nodes.num_nodes, keyframe=0)
        stats = SkinningStats()
        deform_hybrid(nodes, timeline, 1, sphere, stats)
        deform_hybrid(nodes, timeline, 2, sphere, stats)
        assert stats.deformations == 2
        assert stats.dqs_fallbacks == 0

    def test_hybrid_gradcheck(self):
        mesh = grid_mesh(3)
        nodes = sample_control_nodes(mesh, 4, seed=1, neighbors=3)
        gen = torch.Generator().manual_seed(2)
        rotations = (torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
                     + 0.2 * torch.randn(4, 4, generator=gen, dtype=torch.float64)).requires_grad_(True)
        translations = (0.1 * torch.randn(4, 3, generator=gen, dtype=torch.float64)).requires_grad_(True)
        shears = NodeTransforms.identity(4).shears

        def fn(r, t):
            transforms = NodeTransforms(r, shears, t, torch.full((4,), 0.4, dtype=torch.float64))
            return blend_hybrid(nodes, transforms, mesh.vertices)

        assert torch.autograd.gradcheck(fn, (rotations, translations), eps=1e-6, atol=1e-6)


class TestTimeline:
    def test_keyframe_is_identity(self):
        timeline = DeformationTimeline(4, 6, keyframe=1)
        with torch.no_grad():
            timeline.translations.fill_(2.0)
        identity = timeline.transforms(1)
        assert float(identity.translations.abs().sum()) == 0.0
        assert torch.equal(identity.rotations[:, 0], torch.ones(6, dtype=torch.float64))

    def test_bad_keyframe_and_frame(self):
        with pytest.raises(ValueError):
            DeformationTimeline(4, 6, keyframe=4)
        with pytest.raises(IndexError):
            DeformationTimeline(4, 6, keyframe=0).transforms(4)

    def test_renormalize_restores_unit_quaternions(self):
        timeline = DeformationTimeline(3, 5, keyframe=0)
        with torch.no_grad():
            timeline.rotations.mul_(3.0)
            timeline.translations.fill_(1.0)
        timeline.renormalize_()
        assert torch.allclose(timeline.rotations.norm(dim=-1), torch.ones(3, 5, dtype=torch.float64))
        assert float(timeline.translations[0].abs().sum()) == 0.0
        assert float(timeline.translations[1].abs().sum()) == 15.0

    def test_smoothness_loss(self):
        timeline = DeformationTimeline(3, 2, keyframe=0)
        assert float(timeline.smoothness_loss()) == 0.0
        with torch.no_grad():
            timeline.translations[2, :, 0] = 1.0
        # one jump of 1 per node between frames 1 and 2, averaged over 2 x 2 pairs
        assert float(timeline.smoothness_loss()) == pytest.approx(0.5)

    def test_save_and_load_is_exact(self, tmp_path):
        timeline = DeformationTimeline(4, 3, keyframe=2)
        gen = torch.Generator().manual_seed(5)
        with torch.no_grad():
            timeline.translations.copy_(torch.randn(4, 3, 3, generator=gen, dtype=torch.float64))
            timeline.shears.add_(0.01 * torch.randn(4, 3, 6, generator=gen, dtype=torch.float64))
        timeline.set_rigidity(torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64))

        loaded = load_timeline(save_timeline(timeline, str(tmp_path / 'timeline.bin')))
        assert loaded.keyframe == 2
        assert torch.equal(loaded.translations, timeline.translations)
        assert torch.equal(loaded.shears, timeline.shears)
        assert torch.allclose(loaded.rigidity, torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64))

    def test_truncated_checkpoint(self, tmp_path):
        path = save_timeline(DeformationTimeline(2, 2, keyframe=0), str(tmp_path / 'timeline.bin'))
        with open(path, 'rb') as f:
            data = f.read()
        with open(path, 'wb') as f:
            f.write(data[:-5])
        with pytest.raises(CheckpointFormatError) as info:
            load_timeline(path)
        assert info.value.offset == len(data) - 5

    def test_bad_magic(self, tmp_path):
        path = save_timeline(DeformationTimeline(2, 2, keyframe=0), str(tmp_path / 'timeline.bin'))
        with open(path, 'r+b') as f:
            f.write(b'NOTMAGIC')
        with pytest.raises(CheckpointFormatError) as info:
            load_timeline(path)
        assert info.value.offset == 0

    def test_mlp_starts_at_identity_and_bakes(self, tmp_path):
        mlp = build_timeline('mlp', 5, 4, keyframe=2)
        assert isinstance(mlp, DeformationMLP)
        step = mlp.transforms(3)
        assert torch.allclose(step.translations, torch.zeros(4, 3, dtype=torch.float64))
        assert torch.allclose(step.rotations, NodeTransforms.identity(4).rotations)

        with torch.no_grad():
            mlp.net[-1].bias.normal_(0.0, 0.05, generator=torch.Generator().manual_seed(0))
        table = mlp.bake_to_table()
        for frame in (0, 1, 3, 4):
            assert torch.allclose(table.transforms(frame).translations, mlp.transforms(frame).translations)
        loaded = load_timeline(save_timeline(mlp, str(tmp_path / 'mlp.bin')))
        assert torch.allclose(loaded.translations[4], mlp.transforms(4).translations)

    def test_unknown_timeline_kind(self):
        with pytest.raises(ValueError):
            build_timeline('spline', 3, 4, 0)
