"""Rotation parameterizations shared by the body model, scaffold and optimizers.

All functions are plain tensor ops so gradients flow through them. The 6D
representation (first two matrix columns, re-orthonormalized) is used for
optimization because it has no gradient singularities; rotation matrices are
the storage form; quaternions parameterize per-Gaussian covariance frames.
"""

from __future__ import annotations

import torch
from torch import Tensor


def quaternion_to_matrix(quat: Tensor) -> Tensor:
    """Unit quaternion(s) (w, x, y, z) -> rotation matrix, shape [..., 3, 3].

    Input is assumed normalized; see `normalize_quaternion`.
    """
    w, x, y, z = torch.unbind(quat, dim=-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(quat.shape[:-1] + (3, 3))


def normalize_quaternion(quat: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize to unit length; raises on (near-)zero quaternions."""
    norm = torch.linalg.vector_norm(quat, dim=-1, keepdim=True)
    if bool((norm.detach() < eps).any()):
        raise ValueError(f"quaternion norm below {eps}")
    return quat / norm


def rotation_6d_to_matrix(d6: Tensor) -> Tensor:
    """6D rotation (two raw 3-vectors) -> rotation matrix via Gram-Schmidt.

    Columns of the result are (b1, b2, b1 x b2); input shape [..., 6].
    """
    a1, a2 = d6[..., :3], d6[..., 3:]
    b1 = torch.nn.functional.normalize(a1, dim=-1)
    b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = torch.nn.functional.normalize(b2, dim=-1)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack((b1, b2, b3), dim=-1)


def matrix_to_rotation_6d(matrix: Tensor) -> Tensor:
    """Rotation matrix -> 6D form (first two columns, flattened)."""
    return matrix[..., :, :2].transpose(-1, -2).reshape(matrix.shape[:-2] + (6,))


def axis_angle_to_matrix(axis_angle: Tensor) -> Tensor:
    """Rodrigues formula, input shape [..., 3] (axis * angle in radians)."""
    angle = torch.linalg.vector_norm(axis_angle, dim=-1, keepdim=True)
    axis = axis_angle / torch.clamp(angle, min=1e-12)
    w, x, y, z = (
        torch.cos(angle[..., 0] / 2),
        axis[..., 0] * torch.sin(angle[..., 0] / 2),
        axis[..., 1] * torch.sin(angle[..., 0] / 2),
        axis[..., 2] * torch.sin(angle[..., 0] / 2),
    )
    return quaternion_to_matrix(torch.stack((w, x, y, z), dim=-1))


def is_rotation_matrix(matrix: Tensor, tol: float = 1e-5) -> bool:
    """Orthonormality + determinant +1 check within `tol` (no grad)."""
    with torch.no_grad():
        m = matrix.reshape(-1, 3, 3)
        eye = torch.eye(3, dtype=m.dtype, device=m.device)
        ortho_err = (m @ m.transpose(-1, -2) - eye).abs().max()
        det_err = (torch.linalg.det(m) - 1.0).abs().max()
        return bool(ortho_err <= tol and det_err <= tol)
