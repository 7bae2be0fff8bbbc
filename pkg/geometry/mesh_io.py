#!/usr/bin/env python3
"""
Mesh import/export
OBJ (vertices + triangle faces) and binary little-endian PLY through trimesh.
"""

import logging
import os

import numpy as np
import torch
import trimesh

from exceptions import MeshFormatError
from geometry.mesh import TriMesh
from utils.data_validator import DataValidator

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ('obj', 'ply')


def _file_type(path: str) -> str:
    ext = os.path.splitext(path)[1].lower().lstrip('.')
    if ext not in SUPPORTED_FORMATS:
        raise MeshFormatError(f"Unsupported mesh format '.{ext}' (expected one of {SUPPORTED_FORMATS})")
    return ext


def load_mesh(path: str, dtype=torch.float64, with_weights: bool = True) -> TriMesh:
    """Load a triangle mesh without any vertex merging or reordering"""
    file_type = _file_type(path)
    if not os.path.exists(path):
        raise MeshFormatError(f"Mesh file not found: {path}")

    try:
        loaded = trimesh.load_mesh(path, file_type=file_type, process=False, force='mesh')
    except Exception as e:
        raise MeshFormatError(f"Could not read {path}: {e}") from e

    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        raise MeshFormatError(f"{path} does not contain a triangle mesh")

    mesh = TriMesh(torch.tensor(np.asarray(loaded.vertices), dtype=dtype),
                   torch.tensor(np.asarray(loaded.faces), dtype=torch.long))

    is_valid, errors = DataValidator().validate(mesh, 'mesh')
    if not is_valid:
        raise MeshFormatError(f"Invalid mesh {path}: " + '; '.join(errors))

    logger.info(f"Loaded mesh {path}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
    return mesh.with_cotangent_weights() if with_weights else mesh


def save_mesh(mesh: TriMesh, path: str) -> str:
    """Write OBJ or binary little-endian PLY, chosen by extension"""
    file_type = _file_type(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    out = trimesh.Trimesh(vertices=mesh.vertices.detach().cpu().numpy(),
                          faces=mesh.faces.cpu().numpy(), process=False)
    if file_type == 'ply':
        out.export(path, file_type='ply', encoding='binary')
    else:
        out.export(path, file_type='obj', include_normals=False, include_texture=False)

    logger.debug(f"Saved mesh to {path}")
    return path
