"""Differentiable splatting of world Gaussians into RGB, normal and alpha images.

Each Gaussian carries a normal, its shortest axis turned towards the camera, and the
normal is composited alongside colour. Normals are composited linearly and are not
re-normalized per pixel; the default background normal is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._raster import CUTOFF_D2, T_MIN, rasterize
from .gaussians import WorldGaussians, promote_to_world

COV_DILATION = 0.3  # px^2 added to the 2D covariance diagonal


@dataclass
class Camera:
    """Pinhole camera, OpenCV convention (x right, y down, z forward).

    ``rotation``/``translation`` map world to camera: x_cam = R x_world + t.
    Pixel (row, col) has its centre at image coordinates (col + 0.5, row + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near=0.01):
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(fx, fy, width / 2.0, height / 2.0, rot, -rot @ eye, width, height, near)

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": int(self.width), "height": int(self.height), "near": float(self.near),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "rotation", "translation", "width", "height")},
                   near=d.get("near", 0.01))


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    normal: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    transmittance: torch.Tensor  # (H, W)
    inputs: dict = field(default_factory=dict, repr=False)


@dataclass
class Projection:
    means: torch.Tensor  # (N, 2)
    cov: torch.Tensor  # (N, 2, 2), dilated
    depth: torch.Tensor  # (N,)
    visible: torch.Tensor  # (N,) bool


def gaussian_world_normal(rotation, scale, camera_center, position):
    """Shortest-axis normal of each Gaussian, flipped to face the camera.

    Ties in the minimum scale resolve to the lowest axis index.
    """
    idx = torch.argmin(scale, dim=-1)
    normal = torch.gather(rotation, -1, idx[..., None, None].expand(*rotation.shape[:-1], 1))[..., 0]
    view = position - torch.as_tensor(camera_center, dtype=position.dtype)
    flip = (normal * view).sum(-1) > 0
    return torch.where(flip[..., None], -normal, normal)


def project_gaussians(position, rotation, scale, camera):
    """EWA projection of 3D Gaussians; culls those in front of the near plane."""
    dtype = position.dtype
    W = torch.as_tensor(camera.rotation, dtype=dtype)
    t = torch.as_tensor(camera.translation, dtype=dtype)
    p = position @ W.T + t
    z = p[:, 2]
    visible = z > camera.near
    zs = torch.where(visible, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    means = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], -1)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([camera.fx / zs, zero, -camera.fx * x / zs**2], -1),
            torch.stack([zero, camera.fy / zs, -camera.fy * y / zs**2], -1),
        ],
        dim=-2,
    )
    M = rotation * scale[:, None, :]  # R S
    cov3 = M @ M.transpose(-1, -2)
    T = J @ W
    cov2 = T @ cov3 @ T.transpose(-1, -2) + COV_DILATION * torch.eye(2, dtype=dtype)
    return Projection(means, cov2, z, visible)


def project_gaussian(position, rotation, scale, camera):
    """Single-Gaussian convenience wrapper; returns ``None`` when culled."""
    proj = project_gaussians(position[None], rotation[None], scale[None], camera)
    if not bool(proj.visible[0]):
        return None
    return proj.means[0], proj.cov[0], proj.depth[0]


def _conics(cov):
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], -1)


def _prepare(world, camera, background_rgb, background_normal):
    dtype = world.position.dtype
    proj = project_gaussians(world.position, world.rotation, world.scale, camera)
    normals = gaussian_world_normal(world.rotation, world.scale, camera.center, world.position)
    keep = proj.visible & world.active
    feats = torch.cat([world.color, normals], dim=-1)
    bg = torch.cat(
        [torch.as_tensor(background_rgb, dtype=dtype).reshape(3), torch.as_tensor(background_normal, dtype=dtype).reshape(3)]
    )
    depth = proj.depth.detach()
    idx = torch.nonzero(keep).flatten()
    order = idx[torch.sort(depth[idx], stable=True).indices]
    return proj, feats, bg, order


def render_gaussians(world, camera, background_rgb=(0.0, 0.0, 0.0), background_normal=(0.0, 0.0, 0.0)):
    """Tile-based render of already-promoted Gaussians."""
    proj, feats, bg, order = _prepare(world, camera, background_rgb, background_normal)
    conics = _conics(proj.cov)
    cov_diag = torch.stack([proj.cov[:, 0, 0], proj.cov[:, 1, 1]], -1).detach()
    image, trans = rasterize(proj.means, conics, world.opacity, feats, bg, cov_diag, order, camera.width, camera.height)
    return RenderOutput(
        rgb=image[..., :3], normal=image[..., 3:], alpha=1.0 - trans, transmittance=trans
    )


def render(cloud, vertices, faces, camera, background_rgb=(0.0, 0.0, 0.0), background_normal=(0.0, 0.0, 0.0),
           residuals=None):
    """Render a triangle-bound cloud on posed ``vertices``."""
    world = promote_to_world(cloud, vertices, faces, residuals=residuals)
    out = render_gaussians(world, camera, background_rgb, background_normal)
    out.inputs = {"vertices": vertices, **{k: getattr(cloud, k) for k in cloud.TRAINABLE}}
    return out


def render_backward(output, grad_rgb=None, grad_normal=None, grad_alpha=None, wrt=None):
    """Gradients of <grad_rgb, rgb> + <grad_normal, normal> + <grad_alpha, alpha>.

    ``wrt`` is a dict of tensors (defaults to ``output.inputs``: the cloud parameters
    and posed vertices). Returns a dict with the same keys.
    """
    if output.rgb.grad_fn is None:
        raise RuntimeError("render_backward needs a forward pass recorded with gradients enabled")
    wrt = output.inputs if wrt is None else wrt
    outs, grads = [], []
    for tensor, g in ((output.rgb, grad_rgb), (output.normal, grad_normal), (output.alpha, grad_alpha)):
        if g is not None:
            outs.append(tensor)
            grads.append(torch.as_tensor(g, dtype=tensor.dtype))
    names = [k for k, v in wrt.items() if isinstance(v, torch.Tensor) and v.requires_grad]
    if not outs:
        return {k: torch.zeros_like(wrt[k]) for k in names}
    res = torch.autograd.grad(outs, [wrt[k] for k in names], grads, retain_graph=True, allow_unused=True)
    return {k: (torch.zeros_like(wrt[k]) if r is None else r) for k, r in zip(names, res)}


def render_reference(world, camera, background_rgb=(0.0, 0.0, 0.0), background_normal=(0.0, 0.0, 0.0)):
    """Brute-force renderer: every pixel visits every Gaussian, no tiling.

    Plain Python loops in float64; only meant for checking the tiled renderer.
    """
    with torch.no_grad():
        proj, feats, bg, order = _prepare(world, camera, background_rgb, background_normal)
    means = proj.means.double().numpy()
    cov = proj.cov.double().numpy()
    opac = world.opacity.detach().double().numpy()
    feats = feats.detach().double().numpy()
    bg = bg.double().numpy()
    e_cut = math.exp(-0.5 * CUTOFF_D2)
    H, W = camera.height, camera.width
    out = np.zeros((H, W, 6))
    trans = np.zeros((H, W))
    inv = [np.linalg.inv(cov[g]) for g in range(len(cov))]
    for row in range(H):
        for col in range(W):
            p = np.array([col + 0.5, row + 0.5])
            T = 1.0
            acc = np.zeros(6)
            for g in order.tolist():
                if T < T_MIN:
                    break
                d = p - means[g]
                d2 = float(d @ inv[g] @ d)
                if d2 >= CUTOFF_D2:
                    continue
                a = opac[g] * max(0.0, (math.exp(-0.5 * d2) - e_cut) / (1.0 - e_cut))
                acc += feats[g] * a * T
                T *= 1.0 - a
            out[row, col] = acc + T * bg
            trans[row, col] = T
    return out[..., :3], out[..., 3:], 1.0 - trans


__all__ = [
    "Camera", "RenderOutput", "WorldGaussians", "gaussian_world_normal", "project_gaussian",
    "project_gaussians", "render", "render_backward", "render_gaussians", "render_reference",
]
