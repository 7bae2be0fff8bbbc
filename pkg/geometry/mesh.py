#!/usr/bin/env python3
"""
Triangle mesh primitives
Cotangent weights, barycentric lookup and ray casting on TriMesh.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse
import torch
from torch import Tensor

from exceptions import DegenerateFaceError
from geometry.camera import CameraPose, pixel_grid, pixel_rays

logger = logging.getLogger(__name__)

COT_WEIGHT_FLOOR = 1e-6
DEGENERATE_AREA = 1e-14
RAY_DET_EPS = 1e-12
BARY_TOLERANCE = 1e-9
RAY_CHUNK = 4096


@dataclass(frozen=True)
class EdgeWeights:
    """Undirected edges (i < j) and their cotangent weights"""
    edges: Tensor
    weights: Tensor

    def as_dict(self) -> Dict[Tuple[int, int], float]:
        return {(int(i), int(j)): float(w) for (i, j), w in zip(self.edges.tolist(), self.weights.tolist())}

    def weight(self, i: int, j: int) -> float:
        a, b = min(i, j), max(i, j)
        match = (self.edges[:, 0] == a) & (self.edges[:, 1] == b)
        if not bool(match.any()):
            raise KeyError(f"({i}, {j}) is not an edge")
        return float(self.weights[match][0])


@dataclass(frozen=True)
class TriMesh:
    """Vertices [V, 3], faces [F, 3] (long) and optional cotangent edge weights"""
    vertices: Tensor
    faces: Tensor
    edge_weights: Optional[EdgeWeights] = field(default=None, compare=False)

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_faces(self) -> int:
        return int(self.faces.shape[0])

    def with_vertices(self, vertices: Tensor) -> 'TriMesh':
        """Same topology, new positions (edge weights stay those of the canonical mesh)"""
        return replace(self, vertices=vertices)

    def with_cotangent_weights(self) -> 'TriMesh':
        return replace(self, edge_weights=cotangent_weights(self))

    def to(self, dtype) -> 'TriMesh':
        return replace(self, vertices=self.vertices.to(dtype))

    def face_corners(self, vertices: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
        v = self.vertices if vertices is None else vertices
        return v[..., self.faces[:, 0], :], v[..., self.faces[:, 1], :], v[..., self.faces[:, 2], :]

    def bounding_box_diagonal(self) -> float:
        extent = self.vertices.max(dim=0).values - self.vertices.min(dim=0).values
        return float(extent.norm())

    def centroid(self) -> Tensor:
        return self.vertices.mean(dim=0)


def mesh_edges(faces: Tensor) -> Tensor:
    """Unique undirected edges (i < j), sorted lexicographically"""
    pairs = torch.cat([faces[:, [1, 2]], faces[:, [2, 0]], faces[:, [0, 1]]], dim=0)
    pairs = torch.sort(pairs, dim=1).values
    return torch.unique(pairs, dim=0)


def edge_face_counts(faces: Tensor) -> Tuple[Tensor, Tensor]:
    """Undirected edges and the number of faces sharing each"""
    pairs = torch.cat([faces[:, [1, 2]], faces[:, [2, 0]], faces[:, [0, 1]]], dim=0)
    pairs = torch.sort(pairs, dim=1).values
    return torch.unique(pairs, dim=0, return_counts=True)


def mean_edge_length(mesh: TriMesh) -> float:
    edges = mesh_edges(mesh.faces)
    lengths = (mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]).norm(dim=-1)
    return float(lengths.mean())


def face_areas(mesh: TriMesh, vertices: Optional[Tensor] = None) -> Tensor:
    v0, v1, v2 = mesh.face_corners(vertices)
    return 0.5 * torch.cross(v1 - v0, v2 - v0, dim=-1).norm(dim=-1)


def face_normals(mesh: TriMesh, vertices: Optional[Tensor] = None) -> Tensor:
    v0, v1, v2 = mesh.face_corners(vertices)
    n = torch.cross(v1 - v0, v2 - v0, dim=-1)
    return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-30)


def _corner_cotangents(mesh: TriMesh) -> Tuple[Tensor, Tensor]:
    """Per-face opposite-edge pairs [3F, 2] and the cotangent of the opposite corner [3F]"""
    v0, v1, v2 = mesh.face_corners()
    double_area = torch.cross(v1 - v0, v2 - v0, dim=-1).norm(dim=-1)

    degenerate = torch.nonzero(double_area <= DEGENERATE_AREA).flatten()
    if degenerate.numel() > 0:
        raise DegenerateFaceError(int(degenerate[0]))

    def cot(apex, a, b):
        return ((a - apex) * (b - apex)).sum(-1) / double_area

    cots = torch.cat([cot(v0, v1, v2), cot(v1, v2, v0), cot(v2, v0, v1)])
    f = mesh.faces
    pairs = torch.cat([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]], dim=0)
    return torch.sort(pairs, dim=1).values, cots


def cotangent_weights(mesh: TriMesh, clamp: bool = True) -> EdgeWeights:
    """
    w(i, j) = 1/2 (cot a + cot b) for interior edges, 1/2 cot a on the boundary

    With `clamp`, weights are floored at 1e-6 (obtuse corners give negative
    values). Raises DegenerateFaceError for a zero-area face.
    """
    pairs, cots = _corner_cotangents(mesh)
    edges, inverse = torch.unique(pairs, dim=0, return_inverse=True)
    weights = torch.zeros(edges.shape[0], dtype=cots.dtype).index_add_(0, inverse, 0.5 * cots)
    if clamp:
        weights = weights.clamp_min(COT_WEIGHT_FLOOR)
    return EdgeWeights(edges, weights)


def cotangent_laplacian(mesh: TriMesh, clamp: bool = False) -> scipy.sparse.csr_matrix:
    """Sparse V x V Laplacian L = D - W; rows sum to zero"""
    ew = cotangent_weights(mesh, clamp=clamp)
    i = ew.edges[:, 0].numpy()
    j = ew.edges[:, 1].numpy()
    w = ew.weights.detach().cpu().numpy().astype(np.float64)
    n = mesh.num_vertices

    off = scipy.sparse.coo_matrix((np.concatenate([-w, -w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                                  shape=(n, n))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + scipy.sparse.diags(diag)).tocsr()


def barycentric_to_world(vertices: Tensor, faces: Tensor, face: Tensor, bary: Tensor) -> Tensor:
    """b0 v0 + b1 v1 + b2 v2 for each (face, bary) pair"""
    face = torch.as_tensor(face, dtype=torch.long)
    if face.numel() and (int(face.min()) < 0 or int(face.max()) >= faces.shape[0]):
        raise IndexError(f"face index out of range [0, {faces.shape[0]})")
    corners = vertices[faces[face]]
    return (bary.to(vertices.dtype)[..., :, None] * corners).sum(dim=-2)


@dataclass(frozen=True)
class RayHits:
    """Nearest hit per ray; face is -1 and depth inf for misses"""
    face: Tensor
    bary: Tensor
    depth: Tensor
    hit: Tensor
    points: Tensor


def intersect_rays(vertices: Tensor, faces: Tensor, origin: Tensor, directions: Tensor) -> RayHits:
    """Two-sided Moller-Trumbore against every face, nearest positive hit"""
    with torch.no_grad():
        v0 = vertices[faces[:, 0]]
        e1 = vertices[faces[:, 1]] - v0
        e2 = vertices[faces[:, 2]] - v0
        tvec = origin[None, :] - v0
        qvec = torch.cross(tvec, e1, dim=-1)
        t_num = (e2 * qvec).sum(-1)

        faces_out, bary_out, depth_out = [], [], []
        for start in range(0, directions.shape[0], RAY_CHUNK):
            dirs = directions[start:start + RAY_CHUNK]
            pvec = torch.cross(dirs[:, None, :].expand(-1, e2.shape[0], -1),
                               e2[None].expand(dirs.shape[0], -1, -1), dim=-1)
            det = (e1[None] * pvec).sum(-1)
            ok = det.abs() > RAY_DET_EPS
            inv = torch.where(ok, 1.0 / torch.where(ok, det, torch.ones_like(det)), torch.zeros_like(det))
            u = (tvec[None] * pvec).sum(-1) * inv
            v = (dirs[:, None, :] * qvec[None]).sum(-1) * inv
            t = t_num[None] * inv

            hit = (ok & (u >= -BARY_TOLERANCE) & (v >= -BARY_TOLERANCE)
                   & (u + v <= 1.0 + BARY_TOLERANCE) & (t > 1e-4))
            t_masked = torch.where(hit, t, torch.full_like(t, float('inf')))
            depth, best = t_masked.min(dim=1)
            bu = u.gather(1, best[:, None]).squeeze(1)
            bv = v.gather(1, best[:, None]).squeeze(1)

            missed = torch.isinf(depth)
            faces_out.append(torch.where(missed, torch.full_like(best, -1), best))
            bary_out.append(torch.stack([1.0 - bu - bv, bu, bv], dim=-1))
            depth_out.append(depth)

        if directions.shape[0] == 0:
            empty = directions.new_zeros(0)
            return RayHits(torch.zeros(0, dtype=torch.long), directions.new_zeros(0, 3), empty,
                           torch.zeros(0, dtype=torch.bool), directions.new_zeros(0, 3))

        face = torch.cat(faces_out)
        bary = torch.cat(bary_out)
        depth = torch.cat(depth_out)
        hit = face >= 0
        points = origin[None, :] + torch.where(hit, depth, torch.zeros_like(depth))[:, None] * directions
        return RayHits(face, bary, depth, hit, points)


def ray_mesh_intersect_batch(mesh: TriMesh, pose: CameraPose, pixels: Tensor) -> RayHits:
    """Cast rays through pixels [N, 2]; ray depth equals camera depth"""
    origin, dirs = pixel_rays(pose.detach(), pixels.to(mesh.vertices.dtype))
    return intersect_rays(mesh.vertices.detach(), mesh.faces, origin, dirs)


def ray_mesh_intersect(mesh: TriMesh, pose: CameraPose, pixel) -> Optional[Tuple[int, Tensor, float]]:
    """(face, bary, depth) of the nearest hit through one pixel, or None on a miss"""
    pixel = torch.as_tensor(pixel, dtype=mesh.vertices.dtype).reshape(1, 2)
    hits = ray_mesh_intersect_batch(mesh, pose, pixel)
    if not bool(hits.hit[0]):
        return None
    return int(hits.face[0]), hits.bary[0], float(hits.depth[0])


def depth_map(mesh: TriMesh, pose: CameraPose) -> Tensor:
    """Ray-cast depth for every pixel, inf where the mesh is missed"""
    k = pose.intrinsics
    grid = pixel_grid(k, mesh.vertices.dtype).reshape(-1, 2)
    hits = ray_mesh_intersect_batch(mesh, pose, grid)
    return hits.depth.reshape(k.height, k.width)
