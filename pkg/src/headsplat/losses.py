"""Training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ._validation import check_same_shape
from .metrics import ssim_torch


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 0.8
    ssim: float = 0.2
    normal: float = 0.1
    position: float = 0.01
    scale: float = 1.0
    dynamics: float = 1e-3
    position_threshold: float = 1.0  # local units
    scale_threshold: float = 0.6  # local units

    def __post_init__(self):
        for name in ("rgb", "ssim", "normal", "position", "scale", "dynamics"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def normal_loss(rendered, target, mask, weight=0.1):
    """weight * mean over pixels of sum_c |rendered - mask * target|."""
    check_same_shape(rendered, target, ("rendered normal", "target normal"))
    if tuple(mask.shape) != tuple(rendered.shape[:-1]):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match image {tuple(rendered.shape[:-1])}")
    return weight * (rendered - mask[..., None] * target).abs().sum(-1).mean()


def photometric_loss(rendered, target, rgb_weight=0.8, ssim_weight=0.2):
    """rgb_weight * L1 + ssim_weight * (1 - SSIM)."""
    check_same_shape(rendered, target, ("rendered", "target"))
    l1 = (rendered - target).abs().mean()
    if ssim_weight == 0:
        return rgb_weight * l1
    return rgb_weight * l1 + ssim_weight * (1.0 - ssim_torch(rendered, target))


def position_regularizer(local_position, threshold):
    return torch.relu(torch.linalg.norm(local_position, dim=-1) - threshold).mean()


def scale_regularizer(local_log_scale, threshold):
    return torch.relu(torch.exp(local_log_scale) - threshold).mean()
