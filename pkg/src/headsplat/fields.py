"""Expression-conditioned refinement fields.

``DeformationField`` maps a canonical vertex position and an expression latent to a
vertex offset. ``DynamicsField`` maps a per-Gaussian code and the latent to residuals
of every Gaussian attribute. Both have zero-initialized output layers, so a fresh
field changes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ShapeMismatchError
from .geometry import quaternion_multiply


def _mlp(n_in, n_out, hidden, generator):
    net = nn.Sequential(
        nn.Linear(n_in, hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.SiLU(),
        nn.Linear(hidden, n_out),
    )
    with torch.no_grad():
        for layer in net[:-1]:
            if isinstance(layer, nn.Linear):
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=generator) * 2 * bound - bound)
                layer.bias.zero_()
        net[-1].weight.zero_()
        net[-1].bias.zero_()
    return net


def _check_latent(latent, dim):
    if latent.shape != (dim,):
        raise ShapeMismatchError(f"latent must have shape ({dim},), got {tuple(latent.shape)}")


class DeformationField(nn.Module):
    """(canonical position, latent) -> offset in meters, scaled by a learnable gain."""

    def __init__(self, latent_dim=32, hidden=64, gain=1e-3, position_scale=10.0, seed=0):
        super().__init__()
        self.latent_dim = latent_dim
        self.position_scale = position_scale
        gen = torch.Generator().manual_seed(seed)
        self.net = _mlp(3 + latent_dim, 3, hidden, gen)
        self.gain = nn.Parameter(torch.tensor(float(gain)))

    def forward(self, positions, latent):
        _check_latent(latent, self.latent_dim)
        x = torch.cat([positions * self.position_scale, latent.expand(positions.shape[0], -1)], dim=-1)
        return self.gain * self.net(x)


def deform_vertices(field, position_map, latent):
    """Per-vertex offsets at the remeshed vertices.

    ``position_map`` is either an (R, R, 3) UV image with NaN on empty texels (vertices
    are its occupied texels in row-major order) or an explicit (V', 3) tensor of
    canonical positions.
    """
    if isinstance(position_map, np.ndarray):
        if position_map.ndim != 3:
            raise ShapeMismatchError("position map must be (R, R, 3)")
        occ = ~np.isnan(position_map[..., 0])
        positions = torch.as_tensor(position_map[occ])
    else:
        positions = position_map
    positions = positions.to(next(field.parameters()).dtype)
    return field(positions, latent.to(positions.dtype))


@dataclass
class DynamicsResiduals:
    position: torch.Tensor  # (N, 3)
    rotation: torch.Tensor  # (N, 4) perturbation added to the identity quaternion
    log_scale: torch.Tensor  # (N, 3)
    opacity: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3), added to the color logit

    def apply(self, position, rotation, log_scale, opacity_logit, color_logit):
        ident = torch.zeros_like(self.rotation)
        ident[:, 0] = 1.0
        dq = ident + self.rotation
        dq = dq / torch.linalg.norm(dq, dim=-1, keepdim=True)
        return (
            position + self.position,
            quaternion_multiply(rotation, dq),
            log_scale + self.log_scale,
            opacity_logit + self.opacity,
            color_logit + self.color,
        )

    def squared_mean(self):
        flat = torch.cat([self.position, self.rotation, self.log_scale, self.opacity[:, None], self.color], dim=-1)
        return (flat * flat).mean()


class DynamicsField(nn.Module):
    """(per-Gaussian code, latent) -> attribute residuals for every Gaussian."""

    N_OUT = 3 + 4 + 3 + 1 + 3

    def __init__(self, n_gaussians, latent_dim=32, code_dim=16, hidden=64, seed=0):
        super().__init__()
        self.latent_dim = latent_dim
        gen = torch.Generator().manual_seed(seed + 1)
        self.codes = nn.Parameter(0.1 * torch.randn(n_gaussians, code_dim, generator=gen))
        self.net = _mlp(code_dim + latent_dim, self.N_OUT, hidden, gen)

    def forward(self, latent):
        _check_latent(latent, self.latent_dim)
        x = torch.cat([self.codes, latent.expand(self.codes.shape[0], -1)], dim=-1)
        out = self.net(x)
        return DynamicsResiduals(out[:, :3], out[:, 3:7], out[:, 7:10], out[:, 10], out[:, 11:14])

    def prune(self, keep):
        """Drop codes of removed Gaussians (returns the new codes parameter)."""
        self.codes = nn.Parameter(self.codes.detach()[keep].clone())
        return self.codes


def dynamics_residuals(field, cloud, latent):
    """Residual bundle for every Gaussian of ``cloud``."""
    if field.codes.shape[0] != len(cloud):
        raise ShapeMismatchError(f"field has {field.codes.shape[0]} codes for {len(cloud)} Gaussians")
    return field(latent.to(field.codes.dtype))
