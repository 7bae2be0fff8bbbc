#!/usr/bin/env python3
"""
Synthetic benchmark scenes
Procedural meshes animated by the skinning model, seen by an orbiting camera,
with ground-truth renders, masks and ray-cast depth maps.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from deformation.control_nodes import ControlNodeSet, default_node_count, sample_control_nodes
from deformation.skinning import IDENTITY_SHEAR, NodeTransforms, deform_hybrid
from deformation.timeline import DeformationTimeline
from gaussians.splat_renderer import RenderSettings, render
from gaussians.surface_gaussians import SurfaceGaussianSet, attach_gaussians, realize
from geometry.camera import CameraPose, Intrinsics, look_at
from geometry.mesh import TriMesh, depth_map

logger = logging.getLogger(__name__)

SCENE_NAMES = ('bending-bar', 'swing-ellipsoid', 'quad-walker')

BEND_MAX = math.radians(60.0)
SWING_MAX = math.radians(35.0)
LEG_SWING_MAX = math.radians(30.0)
LEG_PHASES = (0.0, math.pi, math.pi, 0.0)
HIPS = ((0.35, 0.0, 0.17), (0.35, 0.0, -0.17), (-0.35, 0.0, 0.17), (-0.35, 0.0, -0.17))

COLOR_DIRECTIONS = np.array([[0.8, 0.5, 0.3], [-0.4, 0.9, 0.2], [0.3, -0.2, 0.95]])
COLOR_PHASES = np.array([0.0, 2.1, 4.2])
COLOR_FREQUENCY = 4.0
MASK_THRESHOLD = 0.5


@dataclass
class SyntheticScene:
    """A generated sequence and all of its ground truth"""
    name: str
    canonical: TriMesh
    nodes: ControlNodeSet
    timeline: DeformationTimeline
    vertices: Tensor
    poses: List[CameraPose]
    intrinsics: Intrinsics
    gaussians: SurfaceGaussianSet
    frames: Tensor
    masks: Tensor
    depths: Tensor
    keyframe: int
    arc_degrees: float
    radius: float
    elevation_degrees: float
    center: Tensor
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return int(self.vertices.shape[0])

    def mesh_at(self, frame: int) -> TriMesh:
        return self.canonical.with_vertices(self.vertices[frame])

    def orbit_pose(self, azimuth_degrees: float) -> CameraPose:
        return orbit_pose(azimuth_degrees, self.elevation_degrees, self.radius, self.center, self.intrinsics)

    def heldout_poses(self, azimuths: Sequence[float]) -> List[CameraPose]:
        """Held-out views at azimuths relative to the input arc midpoint"""
        return [self.orbit_pose(a) for a in azimuths]


def _polygon(sides: int, rx: float, ry: float, offset: float = 0.0) -> np.ndarray:
    angles = offset + 2.0 * np.pi * np.arange(sides) / sides
    return np.stack([rx * np.cos(angles), ry * np.sin(angles)], axis=1)


def _tube(cross_section: np.ndarray, stations: np.ndarray, axis: int,
          scales: Optional[np.ndarray] = None,
          caps: Optional[Tuple[float, float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Closed tube: one ring of `cross_section` per station along `axis`, fan-capped at both ends"""
    sides = len(cross_section)
    scales = np.ones(len(stations)) if scales is None else scales
    caps = (stations[0], stations[-1]) if caps is None else caps
    other = [a for a in range(3) if a != axis]

    rings = []
    for station, scale in zip(stations, scales):
        ring = np.zeros((sides, 3))
        ring[:, axis] = station
        ring[:, other[0]] = scale * cross_section[:, 0]
        ring[:, other[1]] = scale * cross_section[:, 1]
        rings.append(ring)
    ends = np.zeros((2, 3))
    ends[0, axis], ends[1, axis] = caps
    vertices = np.concatenate(rings + [ends])

    faces = []
    for r in range(len(stations) - 1):
        for s in range(sides):
            a, b = r * sides + s, r * sides + (s + 1) % sides
            faces += [(a, a + sides, b), (b, a + sides, b + sides)]
    first, last = len(vertices) - 2, len(vertices) - 1
    top = (len(stations) - 1) * sides
    for s in range(sides):
        faces.append((first, (s + 1) % sides, s))
        faces.append((last, top + s, top + (s + 1) % sides))
    return vertices, np.asarray(faces, dtype=np.int64)


def _merge(parts: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    vertices, faces, offset = [], [], 0
    for v, f in parts:
        vertices.append(v)
        faces.append(f + offset)
        offset += len(v)
    return np.concatenate(vertices), np.concatenate(faces)


def bending_bar_mesh() -> Tuple[np.ndarray, np.ndarray]:
    """Square prism along y: 13 rings of 4 vertices plus two cap centres"""
    return _tube(_polygon(4, 0.25, 0.25, math.pi / 4), np.linspace(-0.8, 0.8, 13), axis=1)


def swing_ellipsoid_mesh() -> Tuple[np.ndarray, np.ndarray]:
    """Ellipsoid elongated along x, poles at both lobe tips"""
    radii = (0.9, 0.45, 0.45)
    theta = np.linspace(0.0, np.pi, 11)[1:-1]
    return _tube(_polygon(12, radii[1], radii[2]), radii[0] * np.cos(theta), axis=0,
                 scales=np.sin(theta), caps=(radii[0], -radii[0]))


def quad_walker_mesh() -> Tuple[np.ndarray, np.ndarray]:
    """Box body on four six-sided legs hanging from the hips"""
    body_v, body_f = _tube(_polygon(4, 0.15 * math.sqrt(2), 0.25 * math.sqrt(2), math.pi / 4),
                           np.linspace(-0.5, 0.5, 5), axis=0)
    body_v = body_v + np.array([0.0, 0.15, 0.0])
    parts = [(body_v, body_f)]
    for hip in HIPS:
        leg_v, leg_f = _tube(_polygon(6, 0.07, 0.07), np.linspace(-0.65, 0.0, 3), axis=1)
        parts.append((leg_v + np.array([hip[0], 0.0, hip[2]]), leg_f))
    return _merge(parts)


MESH_BUILDERS = {
    'bending-bar': bending_bar_mesh,
    'swing-ellipsoid': swing_ellipsoid_mesh,
    'quad-walker': quad_walker_mesh,
}


def wave(frame: int, num_frames: int, keyframe: int, phase: float = 0.0) -> float:
    """One oscillation over the sequence, zero at the keyframe"""
    omega = 2.0 * math.pi / max(num_frames, 1)
    return math.sin(omega * (frame - keyframe) + phase) - math.sin(phase)


def node_motion(name: str, rest: np.ndarray, frame: int, num_frames: int, keyframe: int,
                amplitude: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node rotation angle about the world z axis and the pivot it turns around"""
    angles = np.zeros(len(rest))
    pivots = np.zeros_like(rest)

    if name == 'bending-bar':
        base = rest[:, 1].min()
        height = rest[:, 1].max() - base
        angles = amplitude * BEND_MAX * wave(frame, num_frames, keyframe) * (rest[:, 1] - base) / height
        pivots[:, 1] = base
    elif name == 'swing-ellipsoid':
        side = np.sign(rest[:, 0])
        ramp = np.clip((np.abs(rest[:, 0]) - 0.2) / 0.4, 0.0, 1.0)
        angles = amplitude * SWING_MAX * side * ramp * wave(frame, num_frames, keyframe)
        pivots[:, 0] = 0.2 * side
    elif name == 'quad-walker':
        hips = np.asarray(HIPS)
        leg = np.argmin(np.linalg.norm(rest[:, None, [0, 2]] - hips[None, :, [0, 2]], axis=-1), axis=1)
        on_leg = rest[:, 1] < -0.02
        phases = np.asarray(LEG_PHASES)[leg]
        swing = np.array([wave(frame, num_frames, keyframe, p) for p in phases])
        angles = np.where(on_leg, amplitude * LEG_SWING_MAX * swing, 0.0)
        pivots = hips[leg]
    else:
        raise ValueError(f"Unknown scene '{name}' (expected one of {list(SCENE_NAMES)})")
    return angles, pivots


def node_transforms(angles: np.ndarray, pivots: np.ndarray, rest: np.ndarray, rigidity: Tensor,
                    dtype=torch.float64) -> NodeTransforms:
    """Rotation about each pivot expressed around the node rest position: t = c + R(p - c) - p"""
    c, s = np.cos(angles), np.sin(angles)
    R = np.zeros((len(angles), 3, 3))
    R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1], R[:, 2, 2] = c, -s, s, c, 1.0
    t = pivots + np.einsum('mij,mj->mi', R, rest - pivots) - rest
    quats = np.stack([np.cos(angles / 2.0), np.zeros_like(angles), np.zeros_like(angles), np.sin(angles / 2.0)],
                     axis=1)
    return NodeTransforms(torch.tensor(quats, dtype=dtype),
                          torch.tensor(IDENTITY_SHEAR, dtype=dtype).repeat(len(angles), 1),
                          torch.tensor(t, dtype=dtype), rigidity)


def orbit_pose(azimuth_degrees: float, elevation_degrees: float, radius: float, center: Tensor,
               intrinsics: Intrinsics) -> CameraPose:
    """Camera on the orbit sphere looking at `center`; azimuth 0 sits on +z"""
    az, el = math.radians(azimuth_degrees), math.radians(elevation_degrees)
    direction = torch.tensor([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)],
                             dtype=center.dtype)
    return look_at(center + radius * direction, center, intrinsics, dtype=center.dtype)


def orbit_azimuths(num_frames: int, arc_degrees: float) -> List[float]:
    """Evenly spaced azimuths over the arc, centred on 0"""
    if num_frames == 1:
        return [0.0]
    return [arc_degrees * (k / (num_frames - 1) - 0.5) for k in range(num_frames)]


def procedural_colors(points: Tensor) -> Tensor:
    """Smooth position-dependent colours in [0.15, 0.85]"""
    directions = torch.tensor(COLOR_DIRECTIONS, dtype=points.dtype)
    phases = torch.tensor(COLOR_PHASES, dtype=points.dtype)
    return 0.5 + 0.35 * torch.sin(COLOR_FREQUENCY * points @ directions.T + phases)


def oracle_appearance(gaussians: SurfaceGaussianSet, canonical: TriMesh) -> SurfaceGaussianSet:
    """Give the Gaussians the harness colours (stands in for a generated static model)"""
    gaussians.set_colors(procedural_colors(gaussians.anchor_positions(canonical).detach()))
    return gaussians


def make_scene(name: str, config, seed: Optional[int] = None) -> SyntheticScene:
    """
    Generate a scene from the config's scene settings

    Uses NUM_FRAMES, IMAGE_SIZE, ARC_DEGREES, DEFORMATION_AMPLITUDE, KEYFRAME
    (-1 selects the middle frame by construction, not select_keyframe), NODE_COUNT and the CAMERA_* keys. The
    ground-truth deformation is a control-node timeline relative to the
    keyframe, applied with hybrid skinning.
    """
    if name not in MESH_BUILDERS:
        raise ValueError(f"Unknown scene '{name}' (expected one of {list(SCENE_NAMES)})")
    seed = config.SEED if seed is None else seed
    dtype = getattr(torch, config.DTYPE)
    num_frames = int(config.NUM_FRAMES)
    if num_frames < 1:
        raise ValueError(f"Need at least one frame, got {num_frames}")
    keyframe = int(config.KEYFRAME) if config.KEYFRAME >= 0 else num_frames // 2
    if keyframe >= num_frames:
        raise ValueError(f"Keyframe {keyframe} outside [0, {num_frames})")
    arc = float(config.ARC_DEGREES)
    if not 0.0 <= arc <= 360.0:
        raise ValueError(f"Orbit arc must be in [0, 360] degrees, got {arc}")

    vertices, faces = MESH_BUILDERS[name]()
    canonical = TriMesh(torch.tensor(vertices, dtype=dtype), torch.tensor(faces)).with_cotangent_weights()
    count = config.NODE_COUNT or default_node_count(canonical.num_vertices)
    nodes = sample_control_nodes(canonical, count, seed=seed, neighbors=config.SKIN_NEIGHBORS)

    timeline = DeformationTimeline(num_frames, nodes.num_nodes, keyframe, dtype)
    rest = nodes.rest_positions.detach().cpu().numpy().astype(np.float64)
    for frame in range(num_frames):
        if frame == keyframe:
            continue
        angles, pivots = node_motion(name, rest, frame, num_frames, keyframe, config.DEFORMATION_AMPLITUDE)
        timeline.load_transforms(frame, node_transforms(angles, pivots, rest, timeline.rigidity, dtype))
    timeline.requires_grad_(False)

    with torch.no_grad():
        gt_vertices = torch.stack([deform_hybrid(nodes, timeline, k, canonical) for k in range(num_frames)])

    size = int(config.IMAGE_SIZE)
    intrinsics = Intrinsics.default_for(size, size)
    center = canonical.centroid().detach()
    poses = [orbit_pose(az, config.CAMERA_ELEVATION_DEGREES, config.CAMERA_RADIUS, center, intrinsics)
             for az in orbit_azimuths(num_frames, arc)]

    gaussians = oracle_appearance(attach_gaussians(canonical), canonical)
    gaussians.requires_grad_(False)
    settings = RenderSettings.from_config(config)

    frames, masks, depths = [], [], []
    with torch.no_grad():
        for k in range(num_frames):
            mesh = canonical.with_vertices(gt_vertices[k])
            output = render(realize(gaussians, mesh), poses[k], settings)
            frames.append(output.rgb)
            masks.append(output.alpha > MASK_THRESHOLD)
            depths.append(depth_map(mesh, poses[k]))

    params = {'scene': name, 'num_frames': num_frames, 'image_size': size, 'arc_degrees': arc,
              'amplitude': float(config.DEFORMATION_AMPLITUDE), 'keyframe': keyframe, 'seed': seed,
              'node_count': nodes.num_nodes}
    logger.info(f"Generated {name}: {num_frames} frames at {size}x{size}, arc {arc:.0f} deg, "
                f"{canonical.num_vertices} vertices, {nodes.num_nodes} nodes, keyframe {keyframe}")
    return SyntheticScene(name, canonical, nodes, timeline, gt_vertices, poses, intrinsics, gaussians,
                          torch.stack(frames), torch.stack(masks), torch.stack(depths), keyframe, arc,
                          float(config.CAMERA_RADIUS), float(config.CAMERA_ELEVATION_DEGREES), center, params)


def select_keyframe(masks: Tensor) -> int:
    """Frame with the largest mask area; ties go to the earliest frame"""
    areas = masks.reshape(masks.shape[0], -1).sum(dim=1)
    return int(torch.argmax(areas))
