import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from headsplat.gaussians import GaussianCloud, WorldGaussians
from headsplat.gradcheck import check_render, random_render_scene
from headsplat.render import (
    Camera,
    gaussian_world_normal,
    project_gaussian,
    render,
    render_backward,
    render_gaussians,
    render_reference,
)

CUT = 9.0
T_MIN = 1e-4
DILATION = 0.3


def oracle_render(world, cam, bg_rgb, bg_normal):
    """Independent numpy compositor: project, depth-sort, and blend every Gaussian at every pixel."""
    pos = world.position.numpy()
    rot = world.rotation.numpy()
    scale = world.scale.numpy()
    W, t = cam.rotation, cam.translation
    p = pos @ W.T + t
    H, Wd = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:Wd] + 0.5
    T = np.ones((H, Wd))
    acc = np.zeros((H, Wd, 6))
    e_cut = math.exp(-CUT / 2)
    for g in np.argsort(p[:, 2], kind="stable"):
        x, y, z = p[g]
        if z <= cam.near or not bool(world.active[g]):
            continue
        mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        J = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]])
        cov3 = rot[g] @ np.diag(scale[g] ** 2) @ rot[g].T
        cov2 = J @ W @ cov3 @ W.T @ J.T + DILATION * np.eye(2)
        k = int(np.argmin(scale[g]))
        n = rot[g][:, k]
        if n @ (pos[g] - cam.center) > 0:
            n = -n
        feat = np.concatenate([world.color[g].numpy(), n])
        d = np.stack([xs - mean[0], ys - mean[1]], -1)
        d2 = np.einsum("hwi,ij,hwj->hw", d, np.linalg.inv(cov2), d)
        w = np.where(d2 < CUT, np.maximum(0, (np.exp(-d2 / 2) - e_cut) / (1 - e_cut)), 0.0)
        a = float(world.opacity[g]) * w * (T >= T_MIN)
        acc += feat * (a * T)[..., None]
        T = T * (1 - a)
    out = acc + T[..., None] * np.concatenate([bg_rgb, bg_normal])
    return out[..., :3], out[..., 3:], 1 - T


def random_world(seed, n_max=64, size=32):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    pos = np.column_stack([rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n), rng.uniform(-0.3, 0.3, n)])
    if seed % 5 == 0:
        pos[0] = (0.0, 0.0, 3.5)  # behind the near plane / camera
    world = WorldGaussians(
        position=torch.as_tensor(pos),
        rotation=torch.as_tensor(Rotation.random(n, random_state=seed).as_matrix()),
        scale=torch.as_tensor(rng.uniform(0.01, 0.15, size=(n, 3))),
        opacity=torch.as_tensor(rng.uniform(0.05, 0.99, n)),
        color=torch.as_tensor(rng.uniform(size=(n, 3))),
        active=torch.as_tensor(rng.uniform(size=n) > 0.05),
    )
    eye = (rng.normal(scale=0.3), rng.normal(scale=0.3), 2.5)
    f = rng.uniform(1.2, 2.5) * size
    cam = Camera.look_at(eye, (0, 0, 0), (0, 1, 0), f, f, size, size)
    return world, cam


@pytest.mark.parametrize("seed", range(50))
def test_tiled_matches_bruteforce(seed):
    world, cam = random_world(seed)
    rng = np.random.default_rng(1000 + seed)
    bg_rgb, bg_n = rng.uniform(size=3), rng.uniform(-1, 1, size=3)
    out = render_gaussians(world, cam, bg_rgb, bg_n)
    rgb, normal, alpha = oracle_render(world, cam, bg_rgb, bg_n)
    assert np.abs(out.rgb.numpy() - rgb).max() <= 1e-5
    assert np.abs(out.normal.numpy() - normal).max() <= 1e-5
    assert np.abs(out.alpha.numpy() - alpha).max() <= 1e-5


@pytest.mark.parametrize("seed", [0, 3])
def test_reference_renderer_agrees(seed):
    world, cam = random_world(seed, n_max=16, size=20)
    ref = render_reference(world, cam, (0.2, 0.1, 0.0), (0.0, 0.0, 1.0))
    out = render_gaussians(world, cam, (0.2, 0.1, 0.0), (0.0, 0.0, 1.0))
    for a, b in zip(ref, (out.rgb, out.normal, out.alpha)):
        np.testing.assert_allclose(a, b.numpy(), atol=1e-10)


def test_empty_scene_is_background():
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 40, 40, 24, 18)
    world = WorldGaussians(*(torch.zeros(0, *s, dtype=torch.float64) for s in ((3,), (3, 3), (3,), (), (3,))),
                           active=torch.zeros(0, dtype=torch.bool))
    out = render_gaussians(world, cam, (0.1, 0.2, 0.3), (0.0, 0.0, -1.0))
    assert out.rgb.shape == (18, 24, 3)
    assert torch.all(out.rgb == torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    assert torch.all(out.normal == torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64))
    assert torch.all(out.alpha == 0)


def test_single_gaussian_center_and_support():
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 32, 32, 33, 33)
    world = WorldGaussians(
        position=torch.zeros(1, 3, dtype=torch.float64),
        rotation=torch.eye(3, dtype=torch.float64)[None],
        scale=torch.tensor([[0.1, 0.1, 0.01]], dtype=torch.float64),
        opacity=torch.tensor([0.8], dtype=torch.float64),
        color=torch.tensor([[1.0, 0.5, 0.0]], dtype=torch.float64),
        active=torch.ones(1, dtype=torch.bool),
    )
    out = render_gaussians(world, cam)
    alpha = out.alpha.numpy()
    # the centre pixel (16.5, 16.5) sits exactly on the projected mean
    assert alpha[16, 16] == pytest.approx(0.8, abs=1e-12)
    assert np.unravel_index(alpha.argmax(), alpha.shape) == (16, 16)
    assert alpha[0, 0] == 0.0
    np.testing.assert_allclose(out.rgb[16, 16].numpy(), [0.8, 0.4, 0.0], atol=1e-12)
    # thin axis is z; normal faces the camera (camera at +z)
    np.testing.assert_allclose(out.normal[16, 16].numpy() / 0.8, [0, 0, 1], atol=1e-12)


def test_normal_tie_break_and_flip():
    rot = torch.eye(3, dtype=torch.float64)[None]
    scale = torch.tensor([[0.1, 0.1, 0.1]], dtype=torch.float64)
    n = gaussian_world_normal(rot, scale, np.array([0.0, 0.0, 0.0]), torch.tensor([[5.0, 0, 0]], dtype=torch.float64))
    np.testing.assert_array_equal(n.numpy(), [[-1.0, 0, 0]])


def test_project_gaussian_culls_behind_camera():
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 32, 32, 32, 32)
    eye = torch.eye(3, dtype=torch.float64)
    s = torch.full((3,), 0.1, dtype=torch.float64)
    assert project_gaussian(torch.tensor([0, 0, 3.0], dtype=torch.float64), eye, s, cam) is None
    mean, cov, depth = project_gaussian(torch.zeros(3, dtype=torch.float64), eye, s, cam)
    np.testing.assert_allclose(mean.numpy(), [16, 16])
    assert float(depth) == pytest.approx(2.0)
    np.testing.assert_allclose(cov.numpy(), np.eye(2) * ((32 * 0.1 / 2) ** 2 + 0.3), atol=1e-12)


def test_camera_roundtrip_and_validation():
    cam = Camera.look_at((0.3, 0.1, 2), (0, 0, 0), (0, 1, 0), 50, 51, 40, 30)
    back = Camera.from_dict(cam.to_dict())
    for k, v in cam.to_dict().items():
        assert np.array_equal(np.asarray(v), np.asarray(back.to_dict()[k])), k
    np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(cam.rotation @ cam.center + cam.translation, 0, atol=1e-12)
    with pytest.raises(ValueError):
        Camera(50, 50, 20, 20, np.eye(3), np.zeros(3), 0, 40)


@pytest.mark.parametrize("seed", range(4))
def test_render_gradients_finite_difference(seed):
    assert check_render(seed) <= 1e-3


def test_render_backward_matches_autograd():
    cloud, verts, faces, cam = random_render_scene(3, n_gaussians=4, size=10)
    cloud.requires_grad_(True)
    v = torch.as_tensor(verts).requires_grad_(True)
    out = render(cloud, v, faces, cam)
    rng = np.random.default_rng(0)
    g_rgb = rng.normal(size=out.rgb.shape)
    grads = render_backward(out, grad_rgb=g_rgb)
    (torch.as_tensor(g_rgb) * out.rgb).sum().backward()
    assert set(grads) == {"vertices", *GaussianCloud.TRAINABLE}
    torch.testing.assert_close(grads["vertices"], v.grad)
    torch.testing.assert_close(grads["color_logit"], cloud.color_logit.grad)
    empty = render_backward(out)
    assert all(torch.count_nonzero(t) == 0 for t in empty.values())


def test_float32_render_close_to_float64():
    cloud, verts, faces, cam = random_render_scene(1, n_gaussians=6, size=16)
    a = render(cloud, torch.as_tensor(verts), faces, cam)
    b = render(cloud.to(torch.float32), torch.as_tensor(verts, dtype=torch.float32), faces, cam)
    assert b.rgb.dtype == torch.float32
    np.testing.assert_allclose(a.rgb.numpy(), b.rgb.double().numpy(), atol=1e-5)


def _world(pos, scale, opacity, color, rot=None):
    n = len(pos)
    return WorldGaussians(
        position=torch.as_tensor(pos, dtype=torch.float64),
        rotation=torch.eye(3, dtype=torch.float64).expand(n, 3, 3).clone() if rot is None else torch.as_tensor(rot),
        scale=torch.as_tensor(scale, dtype=torch.float64),
        opacity=torch.as_tensor(opacity, dtype=torch.float64),
        color=torch.as_tensor(color, dtype=torch.float64),
        active=torch.ones(n, dtype=torch.bool),
    )


def test_two_stacked_gaussians():
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 32, 32, 33, 33)
    world = _world([[0, 0, 0.1], [0, 0, -0.1]], [[0.1, 0.1, 0.01]] * 2, [0.5, 0.5], [[1, 0, 0], [0, 1, 0]])
    out = render_gaussians(world, cam, background_rgb=(0, 0, 1))
    # centre pixel: weight 0.5 each, front first
    np.testing.assert_allclose(out.rgb[16, 16].numpy(), [0.5, 0.25, 0.25], atol=1e-12)


def test_opaque_gaussian_pixel():
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 32, 32, 33, 33)
    world = _world([[0, 0, 0]], [[0.1, 0.1, 0.01]], [0.999999], [[0.2, 0.4, 0.6]])
    out = render_gaussians(world, cam, background_rgb=(1, 1, 1))
    np.testing.assert_allclose(out.rgb[16, 16].numpy(), [0.2, 0.4, 0.6], atol=1e-5)
    np.testing.assert_allclose(out.normal[16, 16].numpy(), [0, 0, 1], atol=1e-5)
    assert float(out.alpha[16, 16]) == pytest.approx(1.0, abs=1e-5)


def test_alpha_increases_with_opacity():
    cam = Camera.look_at((0, 0, 2), (0, 0, 0), (0, 1, 0), 32, 32, 33, 33)
    world = _world([[0, 0, 0]], [[0.1, 0.1, 0.01]], [0.4], [[1, 1, 1]])
    world.opacity.requires_grad_(True)
    out = render_gaussians(world, cam)
    (g,) = torch.autograd.grad(out.alpha[16, 16], world.opacity)
    assert float(g[0]) > 0


@pytest.mark.parametrize("seed", range(5))
def test_render_invariants(seed):
    world, cam = random_world(seed)
    bg_n = (0.0, 0.0, 0.0)
    out = render_gaussians(world, cam, (0.3, 0.6, 0.9), bg_n)
    np.testing.assert_allclose((out.alpha + out.transmittance).numpy(), 1.0, atol=1e-6)
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    assert out.normal.abs().max() <= 1 + 1e-12
    empty = out.alpha == 0
    assert torch.all(out.rgb[empty] == torch.tensor([0.3, 0.6, 0.9], dtype=torch.float64))
    again = render_gaussians(world, cam, (0.3, 0.6, 0.9), bg_n)
    assert torch.equal(out.rgb, again.rgb) and torch.equal(out.normal, again.normal)


def test_world_normal_examples():
    eye = torch.eye(3, dtype=torch.float64)[None]
    s = torch.tensor([[1.0, 1.0, 0.1]], dtype=torch.float64)
    origin = torch.zeros(1, 3, dtype=torch.float64)
    np.testing.assert_array_equal(gaussian_world_normal(eye, s, np.array([0, 0, 5.0]), origin).numpy(), [[0, 0, 1]])
    np.testing.assert_array_equal(gaussian_world_normal(eye, s, np.array([0, 0, -5.0]), origin).numpy(), [[0, 0, -1]])
    R = torch.as_tensor(Rotation.random(8, random_state=0).as_matrix())
    sc = torch.as_tensor(np.random.default_rng(0).uniform(0.1, 1, (8, 3)))
    n = gaussian_world_normal(R, sc, np.array([1.0, 2, 3]), torch.zeros(8, 3, dtype=torch.float64)).numpy()
    for i in range(8):
        assert min(np.abs(n[i] - s * R[i, :, k].numpy()).max() for k in range(3) for s in (1, -1)) < 1e-15
