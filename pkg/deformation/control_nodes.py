#!/usr/bin/env python3
"""
Control nodes for mesh skinning
Farthest-point sampled handles on mesh vertices with frozen RBF skin weights.
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors
from torch import Tensor

from geometry.mesh import TriMesh

logger = logging.getLogger(__name__)

MIN_NODES = 4
DEFAULT_NEIGHBORS = 4


@dataclass(frozen=True)
class ControlNodeSet:
    """
    Node rest positions and per-vertex skin weights

    neighbor_ids / neighbor_weights are [V, K]; weights are non-negative and
    sum to one per vertex. Column 0 is the nearest node.
    """
    vertex_ids: Tensor
    rest_positions: Tensor
    neighbor_ids: Tensor
    neighbor_weights: Tensor
    bandwidth: float

    @property
    def num_nodes(self) -> int:
        return int(self.rest_positions.shape[0])

    @property
    def num_neighbors(self) -> int:
        return int(self.neighbor_ids.shape[1])


def default_node_count(num_vertices: int) -> int:
    return min(num_vertices, max(16, num_vertices // 50))


def farthest_point_sampling(points: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Greedy FPS from a seeded random start; ties go to the lowest index"""
    rng = np.random.default_rng(seed)
    selected = np.empty(count, dtype=np.int64)
    selected[0] = rng.integers(len(points))
    distance = np.linalg.norm(points - points[selected[0]], axis=1)
    for i in range(1, count):
        selected[i] = int(np.argmax(distance))
        distance = np.minimum(distance, np.linalg.norm(points - points[selected[i]], axis=1))
    return selected


def skin_weights(vertices: np.ndarray, nodes: np.ndarray, neighbors: int, bandwidth: float):
    """Normalized Gaussian RBF weights over the K nearest nodes"""
    k = min(neighbors, len(nodes))
    distances, indices = NearestNeighbors(n_neighbors=k).fit(nodes).kneighbors(vertices)
    logits = -distances ** 2 / (2.0 * bandwidth ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return indices, weights


def sample_control_nodes(mesh: TriMesh, count: int, seed: int = 0,
                         neighbors: int = DEFAULT_NEIGHBORS,
                         bandwidth: Optional[float] = None) -> ControlNodeSet:
    """
    Sample `count` nodes by farthest-point sampling over mesh vertices

    Bandwidth defaults to the mean nearest-node spacing.
    """
    num_vertices = mesh.num_vertices
    if count < MIN_NODES:
        raise ValueError(f"Need at least {MIN_NODES} control nodes for skinning, got {count}")
    if count > num_vertices:
        raise ValueError(f"Cannot sample {count} nodes from {num_vertices} vertices")

    vertices = mesh.vertices.detach().cpu().numpy().astype(np.float64)
    vertex_ids = farthest_point_sampling(vertices, count, seed)
    nodes = vertices[vertex_ids]

    if bandwidth is None:
        spacing, _ = NearestNeighbors(n_neighbors=2).fit(nodes).kneighbors(nodes)
        bandwidth = float(spacing[:, 1].mean())
    if not bandwidth > 0:
        raise ValueError(f"Skinning bandwidth must be positive, got {bandwidth}")

    indices, weights = skin_weights(vertices, nodes, neighbors, bandwidth)
    logger.info(f"Sampled {count} control nodes (seed {seed}, bandwidth {bandwidth:.4f})")

    dtype = mesh.vertices.dtype
    return ControlNodeSet(
        vertex_ids=torch.from_numpy(vertex_ids),
        rest_positions=torch.tensor(nodes, dtype=dtype),
        neighbor_ids=torch.from_numpy(indices.astype(np.int64)),
        neighbor_weights=torch.tensor(weights, dtype=dtype),
        bandwidth=bandwidth,
    )


def save_control_nodes(nodes: ControlNodeSet, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({'vertex_ids': nodes.vertex_ids, 'rest_positions': nodes.rest_positions,
                'neighbor_ids': nodes.neighbor_ids, 'neighbor_weights': nodes.neighbor_weights,
                'bandwidth': nodes.bandwidth}, path)
    return path


def load_control_nodes(path: str) -> ControlNodeSet:
    data = torch.load(path, map_location='cpu')
    return ControlNodeSet(data['vertex_ids'], data['rest_positions'], data['neighbor_ids'],
                          data['neighbor_weights'], float(data['bandwidth']))
