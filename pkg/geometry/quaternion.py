#!/usr/bin/env python3
"""
Quaternion and dual-quaternion primitives
Quaternions are (w, x, y, z) in the last tensor dimension; every function is
batched over leading dimensions and differentiable with torch autograd.
"""

import math
from typing import NamedTuple, Tuple

import torch
from torch import Tensor

NORM_EPS = 1e-12
ARCCOS_GRAD_EPS = 1e-12


class DualQuaternion(NamedTuple):
    """Rigid transform as real (rotation) and dual (translation) quaternion parts"""
    real: Tensor
    dual: Tensor


def quat_identity(*batch: int, dtype=torch.float64, device=None) -> Tensor:
    q = torch.zeros(*batch, 4, dtype=dtype, device=device)
    q[..., 0] = 1.0
    return q


def quat_normalize(q: Tensor) -> Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def quat_canonicalize(q: Tensor) -> Tensor:
    """Pick the w >= 0 representative of the double cover"""
    return torch.where(q[..., :1] < 0, -q, q)


def quat_conjugate(q: Tensor) -> Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_to_matrix(q: Tensor) -> Tensor:
    """Rotation matrix of a unit quaternion"""
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R: Tensor) -> Tensor:
    """Unit quaternion (w >= 0) of a rotation matrix"""
    m00, m01, m02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    m10, m11, m12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    m20, m21, m22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]

    q_abs = torch.sqrt(torch.clamp(torch.stack([
        1.0 + m00 + m11 + m22,
        1.0 + m00 - m11 - m22,
        1.0 - m00 + m11 - m22,
        1.0 - m00 - m11 + m22,
    ], dim=-1), min=0.0))

    candidates = torch.stack([
        torch.stack([q_abs[..., 0] ** 2, m21 - m12, m02 - m20, m10 - m01], dim=-1),
        torch.stack([m21 - m12, q_abs[..., 1] ** 2, m10 + m01, m02 + m20], dim=-1),
        torch.stack([m02 - m20, m10 + m01, q_abs[..., 2] ** 2, m12 + m21], dim=-1),
        torch.stack([m10 - m01, m20 + m02, m21 + m12, q_abs[..., 3] ** 2], dim=-1),
    ], dim=-2)
    candidates = candidates / (2.0 * q_abs[..., None].clamp_min(0.1))

    best = q_abs.argmax(dim=-1)
    index = best[..., None, None].expand(best.shape + (1, 4))
    q = torch.gather(candidates, -2, index).squeeze(-2)
    return quat_canonicalize(quat_normalize(q))


def quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate 3-vectors by unit quaternions"""
    w = q[..., :1]
    u = q[..., 1:]
    uv = torch.cross(u, v, dim=-1)
    return v + 2.0 * (w * uv + torch.cross(u, uv, dim=-1))


def axis_angle_to_quat(omega: Tensor) -> Tensor:
    """Exponential map; exact identity for a zero vector and finite gradients there"""
    theta = torch.sqrt((omega * omega).sum(-1, keepdim=True) + 1e-24)
    half = 0.5 * theta
    scale = torch.sin(half) / theta
    return torch.cat([torch.cos(half), omega * scale], dim=-1)


def quat_from_axis_angle(axis, angle: float, dtype=torch.float64) -> Tensor:
    """Quaternion of a rotation by `angle` radians about `axis`"""
    axis = torch.as_tensor(axis, dtype=dtype)
    axis = axis / axis.norm()
    return torch.cat([
        torch.tensor([math.cos(angle / 2.0)], dtype=dtype),
        axis * math.sin(angle / 2.0),
    ])


class _ClampedArccos(torch.autograd.Function):
    """arccos of a clamped argument whose gradient stays finite at +-1"""

    @staticmethod
    def forward(ctx, x):
        x = x.clamp(-1.0, 1.0)
        ctx.save_for_backward(x)
        return torch.acos(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return -grad / torch.sqrt((1.0 - x * x).clamp_min(ARCCOS_GRAD_EPS))


def geodesic_rotation_distance(R: Tensor, R_hat: Tensor) -> Tensor:
    """Angle in [0, pi] of R R_hat^T"""
    trace = (R * R_hat).sum(dim=(-2, -1))
    return _ClampedArccos.apply((trace - 1.0) / 2.0)


# Dual quaternions

def rigid_to_dualquat(q: Tensor, t: Tensor) -> DualQuaternion:
    """x -> R x + t as a dual quaternion: real = q, dual = 1/2 (0, t) q"""
    t_quat = torch.cat([torch.zeros_like(t[..., :1]), t], dim=-1)
    return DualQuaternion(q, 0.5 * quat_multiply(t_quat, q))


def dualquat_to_rigid(dq: DualQuaternion) -> Tuple[Tensor, Tensor]:
    """Recover (q, t); t = 2 dual conj(real) for unit real part"""
    t = 2.0 * quat_multiply(dq.dual, quat_conjugate(dq.real))
    return dq.real, t[..., 1:]


def dualquat_multiply(a: DualQuaternion, b: DualQuaternion) -> DualQuaternion:
    """Composition: apply b first, then a"""
    return DualQuaternion(
        quat_multiply(a.real, b.real),
        quat_multiply(a.real, b.dual) + quat_multiply(a.dual, b.real),
    )


def dualquat_normalize(dq: DualQuaternion) -> DualQuaternion:
    norm = dq.real.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    return DualQuaternion(dq.real / norm, dq.dual / norm)


def dualquat_transform_points(dq: DualQuaternion, points: Tensor) -> Tensor:
    q, t = dualquat_to_rigid(dq)
    return quat_rotate(q, points) + t
