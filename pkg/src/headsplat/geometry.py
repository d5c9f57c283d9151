"""Rotation helpers shared by the head model, the Gaussian binding and the renderer.

Everything here is written against torch so gradients flow through; callers holding
numpy arrays convert at the boundary.
"""

from __future__ import annotations

import numpy as np
import torch

_SMALL_ANGLE_SQ = 1e-12


def skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix of ``v`` with shape (..., 3) -> (..., 3, 3)."""
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rows = [
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def axis_angle_to_matrix(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, exact identity at zero and smooth through it."""
    theta_sq = (rotvec * rotvec).sum(-1)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    k = skew(rotvec)
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def matrix_to_axis_angle(mat: np.ndarray) -> np.ndarray:
    """Inverse of :func:`axis_angle_to_matrix` for numpy input (evaluation only)."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(mat, dtype=np.float64)).as_rotvec()


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(w, x, y, z) quaternion -> rotation matrix. Normalizes first."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, dim=-2)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a * b for (w, x, y, z) quaternions."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def matrix_to_quaternion(mat: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) -> (w, x, y, z) with w >= 0."""
    from scipy.spatial.transform import Rotation

    mat = np.asarray(mat, dtype=np.float64)
    flat = mat.reshape(-1, 3, 3)
    if flat.shape[0] == 0:
        return np.zeros(mat.shape[:-2] + (4,))
    xyzw = Rotation.from_matrix(flat).as_quat()
    wxyz = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    wxyz[wxyz[:, 0] < 0] *= -1
    return wxyz.reshape(mat.shape[:-2] + (4,))
