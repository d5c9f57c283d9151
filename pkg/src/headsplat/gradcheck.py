"""Finite-difference checks for every differentiable operation.

Each ``check_*`` function builds a random float64 problem from ``seed``, contracts
the operation's outputs with fixed random weights into a scalar, and returns the max
relative error between autograd and central differences.
"""

from __future__ import annotations

import numpy as np
import torch

from .fields import DeformationField, DynamicsField
from .gaussians import GaussianCloud, promote_to_world, triangle_frame
from .head_model import make_toy_model, pose_vertices
from .losses import normal_loss, photometric_loss, position_regularizer, scale_regularizer
from .metrics import autograd_check, grad_check
from .render import Camera, render

RENDER_TOLERANCE = 1e-3
DEFAULT_TOLERANCE = 1e-4
D = torch.float64


def _weights(gen, like):
    return torch.randn(like.shape, generator=gen, dtype=D)


def _contract(gen, *outputs):
    return sum((_weights(gen, o) * o).sum() for o in outputs)


def check_pose_mesh(seed, step=1e-5):
    model = make_toy_model(seed=seed, n_vertices=60, n_shape=4, n_expr=3)
    rng = np.random.default_rng(seed)
    inputs = [
        torch.as_tensor(rng.normal(size=model.n_shape)),
        torch.as_tensor(rng.normal(size=model.n_expr)),
        torch.as_tensor(rng.normal(scale=0.3, size=(model.n_joints, 3))),
        torch.as_tensor(rng.normal(scale=0.3, size=3)),
        torch.as_tensor(rng.normal(scale=0.01, size=3)),
    ]
    w = torch.as_tensor(rng.normal(size=(model.n_vertices, 3)))
    return autograd_check(lambda ps: (w * pose_vertices(model, *ps)).sum(), inputs, step)


def check_triangle_frame(seed, step=1e-6):
    rng = np.random.default_rng(seed)
    verts = [torch.as_tensor(rng.normal(size=3)) for _ in range(3)]
    gen = torch.Generator().manual_seed(seed)
    w_rot, w_org, w_s = torch.randn(3, 3, generator=gen, dtype=D), torch.randn(3, generator=gen, dtype=D), 0.7

    def fn(ps):
        fr = triangle_frame(*ps)
        return (w_rot * fr.rotation).sum() + (w_org * fr.origin).sum() + w_s * fr.scale

    return autograd_check(fn, verts, step)


def _random_patch(rng, n_faces=4):
    """A small fan of triangles around a centre vertex facing +z."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_faces + 1))[:n_faces + 1]
    ring = np.stack([np.cos(angles), np.sin(angles), rng.normal(scale=0.1, size=n_faces + 1)], -1)
    verts = np.concatenate([[[0.0, 0.0, 0.0]], ring * rng.uniform(0.8, 1.2, size=(n_faces + 1, 1))])
    faces = np.array([[0, i + 1, i + 2] for i in range(n_faces)])
    return verts, faces


def _random_cloud(rng, n, n_faces):
    return GaussianCloud(
        parent_face=torch.as_tensor(rng.integers(0, n_faces, size=n)),
        local_position=torch.as_tensor(rng.normal(scale=0.3, size=(n, 3))),
        local_rotation=torch.as_tensor(rng.normal(size=(n, 4))),
        local_log_scale=torch.as_tensor(rng.normal(loc=-1.0, scale=0.3, size=(n, 3))),
        opacity_logit=torch.as_tensor(rng.normal(size=n)),
        color_logit=torch.as_tensor(rng.normal(size=(n, 3))),
    )


def check_promote_to_world(seed, step=1e-6):
    rng = np.random.default_rng(seed)
    verts, faces = _random_patch(rng)
    cloud = _random_cloud(rng, 6, len(faces))
    names = list(GaussianCloud.TRAINABLE)
    parent = cloud.parent_face

    def fn(ps):
        c = GaussianCloud(parent, *ps[:-1])
        world = promote_to_world(c, ps[-1], faces)
        g = torch.Generator().manual_seed(seed)
        return _contract(g, world.position, world.rotation, world.scale, world.opacity, world.color)

    return autograd_check(fn, [getattr(cloud, n) for n in names] + [torch.as_tensor(verts)], step)


def random_render_scene(seed, n_gaussians=3, size=8):
    """Triangle-bound scene in front of a camera: (cloud, vertices, faces, camera)."""
    rng = np.random.default_rng(seed)
    verts, faces = _random_patch(rng)
    verts = verts * 0.25
    cloud = _random_cloud(rng, n_gaussians, len(faces))
    cloud.local_log_scale = torch.as_tensor(rng.uniform(-0.9, -0.4, size=(n_gaussians, 3)))
    cloud.opacity_logit = torch.as_tensor(rng.uniform(-1.0, 1.5, size=n_gaussians))
    eye = (rng.normal(scale=0.1), rng.normal(scale=0.1), 1.2)
    f = 1.6 * size
    cam = Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), f, f, size, size)
    return cloud, verts, faces, cam


def check_render(seed, step=1e-6, n_gaussians=3, size=8):
    cloud, verts, faces, cam = random_render_scene(seed, n_gaussians, size)
    names = list(GaussianCloud.TRAINABLE)
    parent = cloud.parent_face
    bg = (0.1, 0.2, 0.3)

    def fn(ps):
        c = GaussianCloud(parent, *ps[:-1])
        out = render(c, ps[-1], faces, cam, background_rgb=bg)
        g = torch.Generator().manual_seed(seed)
        return _contract(g, out.rgb, out.normal, out.alpha)

    return autograd_check(fn, [getattr(cloud, n) for n in names] + [torch.as_tensor(verts)], step)


def _module_check(module, fn, tensors, step):
    """:func:`autograd_check` for ``fn(weights, rest)`` evaluated via functional calls."""
    leaves = [t.detach().clone().double().requires_grad_(True) for t in tensors]
    out = _functional(module, fn, leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]

    arrays = [t.detach().numpy().copy() for t in leaves]

    def numeric(ps):
        with torch.no_grad():
            return float(_functional(module, fn, [torch.from_numpy(p) for p in ps]))

    return grad_check(numeric, arrays, grads, step)


def _functional(module, fn, leaves):
    names = [n for n, _ in module.named_parameters()]
    return fn(dict(zip(names, leaves[:len(names)])), leaves[len(names):])


def check_dynamics_field(seed, step=1e-6):
    field = DynamicsField(4, latent_dim=6, code_dim=5, hidden=16, seed=seed).to(D)
    with torch.no_grad():
        field.net[-1].weight.normal_(generator=torch.Generator().manual_seed(seed))
    rng = np.random.default_rng(seed)
    latent = torch.as_tensor(rng.normal(size=6))

    def fn(weights, rest):
        res = torch.func.functional_call(field, weights, (rest[0],))
        g = torch.Generator().manual_seed(seed)
        return _contract(g, res.position, res.rotation, res.log_scale, res.opacity, res.color)

    tensors = [p.detach() for p in field.parameters()] + [latent]
    return _module_check(field, fn, tensors, step)


def check_deformation(seed, step=1e-6):
    field = DeformationField(latent_dim=8, hidden=16, gain=0.3, seed=seed).to(D)
    with torch.no_grad():
        field.net[-1].weight.normal_(generator=torch.Generator().manual_seed(seed))
    rng = np.random.default_rng(seed)
    pos = torch.as_tensor(rng.normal(scale=0.1, size=(5, 3)))
    latent = torch.as_tensor(rng.normal(size=8))
    w = torch.as_tensor(rng.normal(size=(5, 3)))

    def fn(weights, rest):
        return (w * torch.func.functional_call(field, weights, (pos, rest[0]))).sum()

    tensors = [p.detach() for p in field.parameters()] + [latent]
    return _module_check(field, fn, tensors, step)


def check_losses(seed, step=1e-6):
    """Worst error over the photometric, normal, position and scale terms."""
    rng = np.random.default_rng(seed)
    a = torch.as_tensor(rng.uniform(0.1, 0.9, size=(12, 12, 3)))
    b = torch.as_tensor(rng.uniform(0.1, 0.9, size=(12, 12, 3)))
    n_hat = torch.as_tensor(rng.normal(size=(12, 12, 3)))
    n = torch.as_tensor(rng.normal(size=(12, 12, 3)))
    mask = torch.as_tensor(rng.uniform(size=(12, 12)))
    # keep norms and scales away from the regularizer kinks
    mu = torch.as_tensor(rng.normal(size=(20, 3)))
    norms = np.linalg.norm(mu.numpy(), axis=1)
    mu = mu * torch.as_tensor(np.where(np.abs(norms - 1.0) < 0.05, 1.2, 1.0))[:, None]
    log_s = torch.as_tensor(rng.normal(loc=-0.5, scale=0.5, size=(20, 3)))
    log_s = torch.where((torch.exp(log_s) - 0.6).abs() < 0.02, log_s + 0.1, log_s)
    errs = [
        autograd_check(lambda ps: photometric_loss(ps[0], b), [a], step),
        autograd_check(lambda ps: normal_loss(ps[0], n, mask), [n_hat], step),
        autograd_check(lambda ps: position_regularizer(ps[0], 1.0), [mu], step),
        autograd_check(lambda ps: scale_regularizer(ps[0], 0.6), [log_s], step),
    ]
    return max(errs)


CHECKS = {
    "pose_mesh": (check_pose_mesh, DEFAULT_TOLERANCE),
    "triangle_frame": (check_triangle_frame, DEFAULT_TOLERANCE),
    "promote_to_world": (check_promote_to_world, DEFAULT_TOLERANCE),
    "render": (check_render, RENDER_TOLERANCE),
    "deformation_field": (check_deformation, DEFAULT_TOLERANCE),
    "dynamics_field": (check_dynamics_field, DEFAULT_TOLERANCE),
    "losses": (check_losses, DEFAULT_TOLERANCE),
}


def run_suite(seeds=range(20), names=None):
    """{name: {"max_error", "tolerance", "passed"}} over all ``seeds``."""
    report = {}
    for name, (fn, tol) in CHECKS.items():
        if names and name not in names:
            continue
        worst = max(fn(int(s)) for s in seeds)
        report[name] = {"max_error": worst, "tolerance": tol, "passed": bool(worst <= tol)}
    return report
