#!/usr/bin/env python3
"""
Tests for the chunk schedule, track files, anchor lifting and track losses
"""

import logging

import numpy as np
import pytest
import torch

from conftest import grid_mesh
from exceptions import InternalError, TrackFormatError
from geometry.camera import CameraPose, Intrinsics, look_at
from tracking.anchors import AnchorAssociation, lift_and_associate
from tracking.chunk_schedule import (ChunkSpec, assign_chunks, build_chunk_schedule, covisible_count,
                                     keyframe_chunk, select_chunk)
from tracking.oracle_tracks import VISIBILITY_TOLERANCE, oracle_tracks, visible_points
from tracking.track_losses import ProjectionCache, multi_track_loss, sample_frame_pairs, track_loss
from tracking.track_set import TrackSet, decode_tracks, encode_trackset, export_tracks, import_tracks

INTRINSICS = Intrinsics(32.0, 16.0, 16.0, 32, 32)


def random_trackset(rng: np.random.Generator, num_points: int, num_frames: int, direction: str,
                    start: int) -> TrackSet:
    visibility = torch.from_numpy(rng.random((num_points, num_frames)) < 0.6)
    positions = torch.from_numpy(rng.uniform(0.0, 32.0, size=(num_points, num_frames, 2)))
    return TrackSet(positions * visibility[..., None], visibility, direction, start)


def point_at_pixel(u: float, v: float, depth: float = 4.0) -> list:
    """World point the identity camera sees at (u, v)"""
    return [(u - INTRINSICS.cx) / INTRINSICS.focal * depth, (v - INTRINSICS.cy) / INTRINSICS.focal * depth, depth]


class TestChunkSchedule:
    def test_documented_example(self):
        schedule = build_chunk_schedule(12, 4)
        assert [c.start for c in schedule.forward] == [0, 4, 8]
        assert [c.start for c in schedule.reverse] == [11, 7, 3]
        assert schedule.num_blocks == 3

    def test_chunk_frame_ranges(self):
        schedule = build_chunk_schedule(12, 4)
        assert schedule.forward[1].frames(12) == list(range(4, 12))
        assert schedule.reverse[1].frames(12) == list(range(7, -1, -1))
        assert keyframe_chunk(5).frames(12) == list(range(12))

    def test_forward_only_mode(self):
        schedule = build_chunk_schedule(10, 3, mode='forward')
        assert schedule.reverse == []
        assert [c.start for c in schedule.forward] == [0, 3, 6, 9]

    def test_stride_one_starts_everywhere(self):
        schedule = build_chunk_schedule(7, 1)
        assert [c.start for c in schedule.forward] == list(range(7))
        assert sorted(c.start for c in schedule.reverse) == list(range(7))

    @pytest.mark.parametrize('args', [(0, 1), (5, 0), (5, 6), (5, 2, 'sideways')])
    def test_invalid_schedules(self, args):
        with pytest.raises(ValueError):
            build_chunk_schedule(*args)

    def test_every_pair_is_covered_both_ways(self):
        for num_frames in range(2, 65):
            upper = np.triu(np.ones((num_frames, num_frames), dtype=bool), k=1)
            for stride in range(1, num_frames + 1):
                schedule = build_chunk_schedule(num_frames, stride)
                for chunks in (schedule.forward, schedule.reverse):
                    cover = np.array([[c.covers(f, num_frames) for f in range(num_frames)] for c in chunks],
                                     dtype=np.int64)
                    both = cover.T @ cover
                    assert bool((both[upper] > 0).all()), (num_frames, stride)


class TestSelectChunk:
    def test_single_covering_chunk(self):
        schedule = build_chunk_schedule(8, 4, mode='forward')
        rng = np.random.default_rng(0)
        tracksets = {c: random_trackset(rng, 5, 8, c.direction, c.start) for c in schedule.chunks}
        assert select_chunk(schedule, tracksets, 1, 2) == schedule.forward[0]

    def test_most_covisible_points_win(self):
        schedule = build_chunk_schedule(8, 4, mode='forward')
        first, second = schedule.forward
        tracksets = {}
        for chunk, count in ((first, 7), (second, 10)):
            visibility = torch.zeros(12, 8, dtype=torch.bool)
            visibility[:count, 5] = True
            visibility[:count, 6] = True
            tracksets[chunk] = TrackSet(torch.zeros(12, 8, 2, dtype=torch.float64), visibility, 'forward', chunk.start)
        assert covisible_count(tracksets[second], 5, 6) == 10
        assert select_chunk(schedule, tracksets, 5, 6) == second

    def test_ties_prefer_lower_start_then_forward(self):
        schedule = build_chunk_schedule(8, 4)
        empty = {c: TrackSet.empty(8, c.direction, c.start) for c in schedule.chunks}
        # frames 0 and 3: forward start 0, reverse starts 7 and 3 all cover them
        assert select_chunk(schedule, empty, 0, 3) == ChunkSpec('forward', 0, 0)
        # frames 5 and 6: forward 0/4 and reverse 7; lowest start is forward 0
        assert select_chunk(schedule, empty, 5, 6).start == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for trial in range(30):
            num_frames = int(rng.integers(4, 16))
            stride = int(rng.integers(1, num_frames + 1))
            schedule = build_chunk_schedule(num_frames, stride)
            tracksets = {c: random_trackset(rng, int(rng.integers(0, 12)), num_frames, c.direction, c.start)
                         for c in schedule.chunks}
            for i in range(num_frames):
                for j in range(i + 1, num_frames):
                    candidates = [c for c in schedule.chunks
                                  if c.covers(i, num_frames) and c.covers(j, num_frames)]
                    expected = min(candidates, key=lambda c: (-covisible_count(tracksets[c], i, j), c.start,
                                                              0 if c.direction == 'forward' else 1))
                    assert select_chunk(schedule, tracksets, i, j) == expected

    def test_no_tracked_chunk_is_an_internal_error(self):
        schedule = build_chunk_schedule(8, 4)
        with pytest.raises(InternalError):
            select_chunk(schedule, {}, 0, 1)

    def test_assign_chunks(self, caplog):
        schedule = build_chunk_schedule(8, 4)
        tracks = [TrackSet.empty(8, 'forward', 4), TrackSet.empty(8, 'reverse', 7),
                  TrackSet.empty(8, 'keyframe', 2), TrackSet.empty(8, 'forward', 3)]
        with caplog.at_level(logging.WARNING):
            assigned = assign_chunks(schedule, tracks)
        assert set(assigned) == {ChunkSpec('forward', 1, 4), ChunkSpec('reverse', 0, 7), keyframe_chunk(2)}
        assert 'track set skipped' in caplog.text


class TestTrackFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        tracksets = [random_trackset(rng, 6, 9, 'forward', 0), random_trackset(rng, 4, 9, 'reverse', 8)]
        loaded = import_tracks(export_tracks(str(tmp_path / 'tracks.trk'), tracksets))
        assert len(loaded) == 2
        for original, read in zip(tracksets, loaded):
            assert (read.direction, read.start) == (original.direction, original.start)
            assert torch.equal(read.visibility, original.visibility)
            assert torch.allclose(read.positions, original.positions, atol=1e-4)

    def test_all_invisible_record_is_accepted(self):
        tracks = TrackSet(torch.zeros(3, 5, 2, dtype=torch.float64), torch.zeros(3, 5, dtype=torch.bool),
                          'keyframe', 2)
        (decoded,) = decode_tracks(encode_trackset(tracks))
        assert decoded.num_points == 3
        assert not bool(decoded.visibility.any())

    def test_truncated_file_names_the_offset(self):
        data = encode_trackset(random_trackset(np.random.default_rng(2), 4, 6, 'forward', 0))
        with pytest.raises(TrackFormatError) as info:
            decode_tracks(data[:-3])
        assert info.value.offset == len(data) - 3
        assert 'offset' in str(info.value)

    def test_truncated_header(self):
        data = encode_trackset(TrackSet.empty(4, 'forward', 0))
        with pytest.raises(TrackFormatError) as info:
            decode_tracks(data[:10])
        assert info.value.offset == 10

    def test_bad_magic_in_second_record(self):
        record = encode_trackset(TrackSet.empty(4, 'forward', 0))
        data = record + b'XXXXXXXX' + record[8:]
        with pytest.raises(TrackFormatError) as info:
            decode_tracks(data)
        assert info.value.offset == len(record)

    def test_visibility_bytes_must_be_boolean(self):
        tracks = TrackSet(torch.zeros(1, 4, 2, dtype=torch.float64), torch.ones(1, 4, dtype=torch.bool), 'forward', 0)
        data = bytearray(encode_trackset(tracks))
        data[-1] = 7
        with pytest.raises(TrackFormatError):
            decode_tracks(bytes(data))

    def test_flow(self):
        positions = torch.tensor([[[10.0, 20.0], [13.0, 24.0]]], dtype=torch.float64)
        tracks = TrackSet(positions, torch.ones(1, 2, dtype=torch.bool), 'forward', 0)
        assert tracks.flow(0, 1).tolist() == [[3.0, 4.0]]


class TestLifting:
    def setup_method(self):
        self.canonical = grid_mesh(4, size=2.0)
        self.deformed = self.canonical.with_vertices(self.canonical.vertices + torch.tensor([0.5, 0.0, 0.0],
                                                                                            dtype=torch.float64))
        self.pose = look_at([0.5, 0.0, 3.0], [0.5, 0.0, 0.0], INTRINSICS)
        self.chunk = ChunkSpec('forward', 0, 0)

    def _tracks(self, pixels):
        positions = torch.tensor(pixels, dtype=torch.float64)[:, None, :].repeat(1, 2, 1)
        return TrackSet(positions, torch.ones(len(pixels), 2, dtype=torch.bool), 'forward', 0)

    def test_lifted_points_land_on_the_canonical_surface(self):
        pixels = [[18.0, 15.0], [10.0, 21.0], [25.0, 12.0]]
        tracks = self._tracks(pixels)
        # analytic ray-plane hits, mapped back by the +0.5 x shift
        expected = torch.tensor([[(u - 16.0) / 32.0 * 3.0, (16.0 - v) / 32.0 * 3.0, 0.0] for u, v in pixels],
                                dtype=torch.float64)
        centers = torch.cat([expected + 1e-4, torch.tensor([[5.0, 5.0, 5.0]], dtype=torch.float64)])

        association = lift_and_associate(tracks, self.chunk, self.deformed, self.canonical, self.pose, centers,
                                         radius=0.01)
        assert association.track_ids.tolist() == [0, 1, 2]
        assert association.gaussian_ids.tolist() == [0, 1, 2]
        assert torch.allclose(association.canonical_points, expected, atol=1e-9)

    def test_far_lifts_are_dropped(self):
        tracks = self._tracks([[18.0, 15.0]])
        centers = torch.tensor([[5.0, 5.0, 5.0]], dtype=torch.float64)
        association = lift_and_associate(tracks, self.chunk, self.deformed, self.canonical, self.pose, centers,
                                         radius=0.01)
        assert len(association) == 0

    def test_mostly_missing_lifts_warn(self, caplog):
        tracks = self._tracks([[0.0, 0.0], [31.0, 0.0], [18.0, 15.0]])
        centers = self.canonical.vertices
        with caplog.at_level(logging.WARNING, logger='tracking.anchors'):
            association = lift_and_associate(tracks, self.chunk, self.deformed, self.canonical, self.pose,
                                             centers, radius=10.0)
        assert len(association) == 1
        assert 'missed the mesh' in caplog.text

    def test_association_is_deterministic(self):
        tracks = self._tracks([[18.0, 15.0], [10.0, 21.0]])
        centers = self.canonical.vertices
        first = lift_and_associate(tracks, self.chunk, self.deformed, self.canonical, self.pose, centers, 10.0)
        second = lift_and_associate(tracks, self.chunk, self.deformed, self.canonical, self.pose, centers, 10.0)
        assert torch.equal(first.gaussian_ids, second.gaussian_ids)


class TestTrackLosses:
    def _association(self, chunk, n=1):
        ids = torch.arange(n)
        return AnchorAssociation(chunk, ids, ids, torch.zeros(n, 3, dtype=torch.float64),
                                 torch.zeros(n, dtype=torch.float64))

    def test_single_term_l1(self):
        chunk = ChunkSpec('forward', 0, 0)
        tracks = TrackSet(torch.tensor([[[13.0, 12.0], [0.0, 0.0]]], dtype=torch.float64),
                          torch.tensor([[True, False]]), 'forward', 0)
        centers = torch.tensor([point_at_pixel(16.0, 16.0)], dtype=torch.float64)
        pose = CameraPose.identity(INTRINSICS)
        loss = track_loss(self._association(chunk), tracks, lambda k: centers, lambda k: pose)
        assert float(loss) == pytest.approx(7.0)

    def test_all_invisible_gives_zero_without_gradient(self):
        chunk = ChunkSpec('forward', 0, 0)
        tracks = TrackSet(torch.zeros(1, 2, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.bool), 'forward', 0)
        centers = torch.tensor([point_at_pixel(16.0, 16.0)], dtype=torch.float64, requires_grad=True)
        pose = CameraPose.identity(INTRINSICS)
        loss = track_loss(self._association(chunk), tracks, lambda k: centers, lambda k: pose)
        assert float(loss) == 0.0
        assert not loss.requires_grad

    def test_behind_camera_terms_are_excluded(self):
        chunk = ChunkSpec('forward', 0, 0)
        tracks = TrackSet(torch.tensor([[[13.0, 12.0]]], dtype=torch.float64), torch.tensor([[True]]), 'forward', 0)
        centers = torch.tensor([[0.0, 0.0, -4.0]], dtype=torch.float64)
        loss = track_loss(self._association(chunk), tracks, lambda k: centers,
                          lambda k: CameraPose.identity(INTRINSICS))
        assert float(loss) == 0.0

    def _flow_setup(self, shift=0.0):
        schedule = build_chunk_schedule(2, 1, mode='forward')
        chunk = schedule.forward[0]
        tracks = TrackSet(torch.tensor([[[10.0, 20.0], [13.0, 24.0]]], dtype=torch.float64),
                          torch.ones(1, 2, dtype=torch.bool), 'forward', 0)
        tracksets = {chunk: tracks, schedule.forward[1]: TrackSet.empty(2, 'forward', 1)}
        centers = {0: torch.tensor([point_at_pixel(10.0, 20.0)], dtype=torch.float64),
                   1: torch.tensor([point_at_pixel(13.0 + shift, 24.0)], dtype=torch.float64)}
        pose = CameraPose.identity(INTRINSICS)
        return schedule, {chunk: self._association(chunk)}, tracksets, centers.__getitem__, lambda k: pose

    def test_flow_matching_prediction_gives_zero(self):
        schedule, associations, tracksets, centers, pose = self._flow_setup()
        loss = multi_track_loss(associations, tracksets, schedule, centers, pose, [(0, 1)])
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_flow_error_is_squared(self):
        schedule, associations, tracksets, centers, pose = self._flow_setup(shift=1.0)
        loss = multi_track_loss(associations, tracksets, schedule, centers, pose, [(0, 1)])
        assert float(loss) == pytest.approx(1.0)

    def test_identical_frames_contribute_nothing(self):
        schedule, associations, tracksets, centers, pose = self._flow_setup(shift=1.0)
        assert float(multi_track_loss(associations, tracksets, schedule, centers, pose, [(1, 1)])) == 0.0

    def test_projection_cache_projects_once(self):
        calls = []

        def centers(frame):
            calls.append(frame)
            return torch.tensor([point_at_pixel(16.0, 16.0)], dtype=torch.float64)

        cache = ProjectionCache(centers, lambda k: CameraPose.identity(INTRINSICS))
        cache(0)
        cache(0)
        cache(1)
        assert calls == [0, 1]

    def test_frame_pairs_are_ordered(self):
        pairs = sample_frame_pairs(np.random.default_rng(0), 6, 50)
        assert len(pairs) == 50
        assert all(0 <= i < j < 6 for i, j in pairs)
        assert sample_frame_pairs(np.random.default_rng(0), 1, 5) == []


class TestOracleTracks:
    def test_ground_truth_gives_zero_track_losses(self, bar_scene):
        num_frames = bar_scene.num_frames
        schedule = build_chunk_schedule(num_frames, 2)
        canonical_centers = bar_scene.gaussians.anchor_positions(bar_scene.canonical)

        def mesh_at(frame):
            return bar_scene.canonical.with_vertices(bar_scene.vertices[frame])

        def centers(frame):
            return bar_scene.gaussians.anchor_positions(mesh_at(frame))

        def pose(frame):
            return bar_scene.poses[frame]

        tracksets, associations = {}, {}
        for chunk in schedule.chunks:
            tracks = oracle_tracks(bar_scene, chunk, num_points=16, noise_px=0.0, seed=0)
            tracksets[chunk] = tracks
            associations[chunk] = lift_and_associate(tracks, chunk, mesh_at(chunk.start), bar_scene.canonical,
                                                     pose(chunk.start), canonical_centers, radius=1e-3)
            assert len(associations[chunk]) > 0

        for chunk in schedule.chunks:
            assert float(track_loss(associations[chunk], tracksets[chunk], centers, pose)) <= 1e-6
        pairs = [(i, j) for i in range(num_frames) for j in range(i + 1, num_frames)]
        assert float(multi_track_loss(associations, tracksets, schedule, centers, pose, pairs)) <= 1e-6

    def test_tracks_only_cover_their_chunk(self, bar_scene):
        chunk = ChunkSpec('forward', 1, 3)
        tracks = oracle_tracks(bar_scene, chunk, num_points=8, seed=1)
        assert tracks.num_frames == bar_scene.num_frames
        assert not bool(tracks.visibility[:, :3].any())
        assert bool(tracks.visibility[:, 3].all())

    def test_static_scene_with_static_camera_gives_constant_tracks(self, small_config):
        from bench.synthetic_scenes import make_scene

        scene = make_scene('bending-bar', small_config.copy(DEFORMATION_AMPLITUDE=0.0, ARC_DEGREES=0.0,
                                                            NUM_FRAMES=3), seed=0)
        tracks = oracle_tracks(scene, ChunkSpec('forward', 0, 0), num_points=8, seed=0)
        assert torch.allclose(tracks.positions[:, 0], tracks.positions[:, 2], atol=1e-9)
        assert torch.equal(tracks.visibility[:, 0], tracks.visibility[:, 2])

    def test_visibility_is_a_depth_test_against_the_mesh(self):
        plane = grid_mesh(4, 1.0)
        pose = look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], INTRINSICS)
        points = torch.tensor([[0.1, 0.05, 0.0],
                               [0.1, 0.05, 0.5 * VISIBILITY_TOLERANCE],
                               [0.1, 0.05, -0.5],
                               [2.0, 0.0, 0.0]], dtype=plane.vertices.dtype)
        visible = visible_points(plane, pose, points)
        assert visible.tolist() == [True, True, False, False]
