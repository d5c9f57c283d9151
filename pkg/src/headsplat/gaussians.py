"""Gaussians bound to mesh triangles.

Each Gaussian stores its position, rotation and log-scale in the local frame of its
parent triangle. The frame has the normalized first edge, the unit normal and their
cross product as columns; its origin is the centroid and its scale the mean edge
length. Deforming the mesh therefore carries the Gaussians along.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from .exceptions import DegenerateTriangleError
from .geometry import quaternion_to_matrix

DEGENERATE_AREA = 1e-12


@dataclass(eq=False)
class GaussianCloud:
    parent_face: torch.Tensor  # (N,) long
    local_position: torch.Tensor  # (N, 3) in triangle-frame units
    local_rotation: torch.Tensor  # (N, 4) (w, x, y, z), normalized on use
    local_log_scale: torch.Tensor  # (N, 3)
    opacity_logit: torch.Tensor  # (N,)
    color_logit: torch.Tensor  # (N, 3), sigmoid gives [0, 1] color

    TRAINABLE = ("local_position", "local_rotation", "local_log_scale", "opacity_logit", "color_logit")

    def __len__(self):
        return self.parent_face.shape[0]

    @property
    def dtype(self):
        return self.local_position.dtype

    @property
    def opacity(self):
        return torch.sigmoid(self.opacity_logit)

    @property
    def color(self):
        return torch.sigmoid(self.color_logit)

    def tensors(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to(self, dtype):
        return replace(self, **{k: v.detach().to(dtype) for k, v in self.tensors().items() if k != "parent_face"})

    def detach(self):
        return replace(self, **{k: v.detach().clone() for k, v in self.tensors().items()})

    def subset(self, keep):
        keep = torch.as_tensor(keep)
        return replace(self, **{k: v[keep] for k, v in self.tensors().items()})

    def requires_grad_(self, flag=True):
        for name in self.TRAINABLE:
            getattr(self, name).requires_grad_(flag)
        return self


@dataclass
class TriangleFrame:
    rotation: torch.Tensor  # (..., 3, 3), columns: edge, normal, edge x normal
    origin: torch.Tensor  # (..., 3)
    scale: torch.Tensor  # (...)


@dataclass
class WorldGaussians:
    position: torch.Tensor  # (N, 3)
    rotation: torch.Tensor  # (N, 3, 3)
    scale: torch.Tensor  # (N, 3) activated
    opacity: torch.Tensor  # (N,) activated
    color: torch.Tensor  # (N, 3) activated
    active: torch.Tensor  # (N,) bool

    def __len__(self):
        return self.position.shape[0]


def _frames(v0, v1, v2):
    e0 = v1 - v0
    e1 = v2 - v0
    cross = torch.linalg.cross(e0, e1)
    double_area = torch.linalg.norm(cross, dim=-1)
    ok = 0.5 * double_area >= DEGENERATE_AREA
    safe = lambda n: torch.where(ok, n, torch.ones_like(n))  # noqa: E731
    x = e0 / safe(torch.linalg.norm(e0, dim=-1))[..., None]
    y = cross / safe(double_area)[..., None]
    z = torch.linalg.cross(x, y)
    rot = torch.stack([x, y, z], dim=-1)
    origin = (v0 + v1 + v2) / 3.0
    scale = (
        torch.linalg.norm(e0, dim=-1) + torch.linalg.norm(v2 - v1, dim=-1) + torch.linalg.norm(e1, dim=-1)
    ) / 3.0
    return TriangleFrame(rot, origin, scale), ok


def triangle_frame(v0, v1, v2):
    """Frame of a single triangle. Raises on (near) zero area."""
    frame, ok = _frames(torch.as_tensor(v0), torch.as_tensor(v1), torch.as_tensor(v2))
    if not bool(ok):
        raise DegenerateTriangleError("triangle area below 1e-12")
    return frame


def triangle_frames(vertices, faces):
    """Batched frames for all faces plus a non-degenerate mask."""
    f = torch.as_tensor(np.asarray(faces), dtype=torch.long)
    return _frames(vertices[f[:, 0]], vertices[f[:, 1]], vertices[f[:, 2]])


def init_cloud(vertices, faces, per_triangle=1, seed=0, dtype=torch.float64):
    """Default-initialized Gaussians, ``per_triangle`` per non-degenerate face.

    Degenerate faces are skipped with a warning. With more than one Gaussian per face
    the in-plane local positions get a seeded jitter.
    """
    if per_triangle < 1:
        raise ValueError("per_triangle must be >= 1")
    verts = torch.as_tensor(np.asarray(vertices), dtype=torch.float64)
    _, ok = triangle_frames(verts, faces)
    good = torch.nonzero(ok).flatten()
    skipped = torch.nonzero(~ok).flatten().tolist()
    if skipped:
        warnings.warn(f"skipped {len(skipped)} degenerate face(s): {skipped[:20]}", stacklevel=2)
    parent = good.repeat_interleave(per_triangle)
    n = parent.shape[0]
    position = torch.zeros(n, 3, dtype=dtype)
    if per_triangle > 1:
        rng = np.random.default_rng(seed)
        jitter = rng.uniform(-0.25, 0.25, size=(n, 2))
        position[:, 0] = torch.as_tensor(jitter[:, 0], dtype=dtype)
        position[:, 2] = torch.as_tensor(jitter[:, 1], dtype=dtype)
    rotation = torch.zeros(n, 4, dtype=dtype)
    rotation[:, 0] = 1.0
    return GaussianCloud(
        parent_face=parent,
        local_position=position,
        local_rotation=rotation,
        local_log_scale=torch.full((n, 3), math.log(0.5), dtype=dtype),
        opacity_logit=torch.zeros(n, dtype=dtype),
        color_logit=torch.zeros(n, 3, dtype=dtype),
    )


def promote_to_world(cloud, vertices, faces, residuals=None):
    """Local Gaussian parameters -> world-space Gaussians on the posed mesh.

    ``residuals`` is an optional bundle from the dynamics field; it is applied
    before promotion (additively, and by quaternion composition for rotation).
    """
    position = cloud.local_position
    rotation = cloud.local_rotation
    log_scale = cloud.local_log_scale
    opacity_logit = cloud.opacity_logit
    color_logit = cloud.color_logit
    if residuals is not None:
        position, rotation, log_scale, opacity_logit, color_logit = residuals.apply(
            position, rotation, log_scale, opacity_logit, color_logit
        )
    frames, ok = triangle_frames(vertices, faces)
    parent = cloud.parent_face
    rot_f = frames.rotation[parent]
    scale_f = frames.scale[parent]
    world_pos = frames.origin[parent] + scale_f[:, None] * (rot_f @ position[..., None])[..., 0]
    world_rot = rot_f @ quaternion_to_matrix(rotation)
    world_scale = scale_f[:, None] * torch.exp(log_scale)
    return WorldGaussians(
        position=world_pos,
        rotation=world_rot,
        scale=world_scale,
        opacity=torch.sigmoid(opacity_logit),
        color=torch.sigmoid(color_logit),
        active=ok[parent],
    )
