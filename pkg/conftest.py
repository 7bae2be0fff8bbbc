#!/usr/bin/env python3
"""
Shared pytest fixtures: small configs, meshes and synthetic scenes
"""

import numpy as np
import pytest
import torch
import trimesh

from bench.synthetic_scenes import make_scene
from config import get_config
from geometry.mesh import TriMesh


def make_trimesh(vertices, faces) -> TriMesh:
    return TriMesh(torch.tensor(np.asarray(vertices), dtype=torch.float64),
                   torch.tensor(np.asarray(faces), dtype=torch.long))


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> TriMesh:
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return make_trimesh(sphere.vertices, sphere.faces).with_cotangent_weights()


def grid_mesh(n: int = 4, size: float = 1.0) -> TriMesh:
    """Flat n x n vertex grid in the z = 0 plane"""
    xs = np.linspace(-size / 2, size / 2, n)
    vertices = np.array([[x, y, 0.0] for y in xs for x in xs])
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces += [(a, a + 1, a + n + 1), (a, a + n + 1, a + n)]
    return make_trimesh(vertices, faces)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def testing_config():
    return get_config('testing')


@pytest.fixture(scope='session')
def small_config():
    return get_config('testing').copy(NUM_FRAMES=6, IMAGE_SIZE=32, TRACK_NOISE_PX=0.0)


@pytest.fixture(scope='session')
def bar_scene(small_config):
    """Bending bar, 6 frames at 32x32; treat as read-only"""
    return make_scene('bending-bar', small_config, seed=0)


@pytest.fixture(scope='session')
def rigid_bar_scene(small_config):
    """Same bar with zero deformation amplitude"""
    return make_scene('bending-bar', small_config.copy(DEFORMATION_AMPLITUDE=0.0), seed=0)
