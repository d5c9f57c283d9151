"""Image metrics and the finite-difference gradient checker."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a, b):
    """PSNR in dB for unit dynamic range; identical images give ``inf``."""
    a = _np(a)
    b = _np(b)
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _window(dtype):
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def ssim_torch(a, b):
    """Differentiable SSIM of (H, W) or (H, W, C) tensors, mean over valid windows."""
    check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {H}x{W}")
    g = _window(a.dtype)
    kx = g.reshape(1, 1, 1, -1)
    ky = g.reshape(1, 1, -1, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kx), ky)

    x = a.permute(2, 0, 1)[:, None]
    y = b.permute(2, 0, 1)[:, None]
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def ssim(a, b):
    """SSIM (11x11 Gaussian window, sigma 1.5) averaged over windows and channels."""
    if isinstance(a, torch.Tensor) and a.requires_grad:
        return ssim_torch(a, torch.as_tensor(b, dtype=a.dtype))
    return float(ssim_torch(torch.as_tensor(_np(a)), torch.as_tensor(_np(b))))


def masked_normal_error(n_hat, n, alpha, threshold=0.5):
    """Mean angle in degrees between normal fields over pixels with alpha > threshold.

    Returns ``None`` for an empty mask.
    """
    n_hat, n, alpha = _np(n_hat), _np(n), _np(alpha)
    check_same_shape(n_hat, n)
    mask = alpha > threshold
    if not mask.any():
        return None
    u = n_hat[mask]
    v = n[mask]
    u = u / np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-12)
    v = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    cos = np.clip((u * v).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def grad_check(fn, params, analytic, step=1e-4):
    """Max relative error between ``analytic`` gradients and central differences.

    ``fn`` maps the list ``params`` (numpy arrays, perturbed in place) to a scalar.
    The error per parameter array is ||g_fd - g|| / max(||g_fd||, ||g||, 1e-12).
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        g = _np(g)
        flat = p.reshape(-1)
        fd = np.zeros(flat.shape[0])
        for i in range(flat.shape[0]):
            old = flat[i]
            flat[i] = old + step
            fp = float(fn(params))
            flat[i] = old - step
            fm = float(fn(params))
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            fd[i] = (fp - fm) / (2 * step)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite analytic gradient")
        denom = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - g.reshape(-1)) / denom))
    return worst


def autograd_check(fn, tensors, step=1e-4):
    """:func:`grad_check` with the analytic side from torch autograd.

    ``fn`` maps a list of float64 tensors to a scalar tensor.
    """
    leaves = [t.detach().clone().double().requires_grad_(True) for t in tensors]
    out = fn(leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]
    arrays = [t.detach().numpy().copy() for t in leaves]

    def numeric(ps):
        with torch.no_grad():
            return float(fn([torch.from_numpy(p) for p in ps]))

    return grad_check(numeric, arrays, grads, step)


def rotation_parameter_error(global_a, joints_a, global_b, joints_b, joint_parents):
    """Mean geodesic angle (radians) between two rotation tracks.

    Root joints are composed with the global rotation first: both rotate the whole
    head, so only their product is observable. Child joints are compared through
    their local rotations. Inputs are axis-angle arrays (F, 3) and (F, J, 3).
    """
    from scipy.spatial.transform import Rotation

    ga, gb = np.asarray(global_a, dtype=np.float64), np.asarray(global_b, dtype=np.float64)
    ja, jb = np.asarray(joints_a, dtype=np.float64), np.asarray(joints_b, dtype=np.float64)
    errs = []
    for k, parent in enumerate(np.asarray(joint_parents)):
        ra, rb = Rotation.from_rotvec(ja[:, k]), Rotation.from_rotvec(jb[:, k])
        if parent < 0:
            ra, rb = Rotation.from_rotvec(ga) * ra, Rotation.from_rotvec(gb) * rb
        errs.append((ra.inv() * rb).magnitude())
    return float(np.mean(errs))
