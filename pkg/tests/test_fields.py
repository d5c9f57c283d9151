import numpy as np
import pytest
import torch

from headsplat.exceptions import ShapeMismatchError
from headsplat.fields import DeformationField, DynamicsField, deform_vertices, dynamics_residuals
from headsplat.gaussians import init_cloud
from headsplat.gradcheck import check_deformation, check_dynamics_field
from headsplat.remesh import render_position_map
from headsplat.render import Camera, render

D = torch.float64


def test_deformation_zero_init(toy):
    field = DeformationField(latent_dim=8, seed=0).to(D)
    pm = render_position_map(toy, np.zeros(toy.n_expr), 16)
    off = deform_vertices(field, pm, torch.randn(8, dtype=D))
    assert off.shape == (int((~np.isnan(pm[..., 0])).sum()), 3)
    assert torch.count_nonzero(off) == 0
    assert field.gain.item() == pytest.approx(1e-3)


def test_deformation_same_input_same_offset():
    field = DeformationField(latent_dim=4, hidden=8, seed=1).to(D)
    with torch.no_grad():
        field.net[-1].weight.normal_()
    p = torch.tensor([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [0.0, 0.0, 0.0]], dtype=D)
    out = field(p, torch.ones(4, dtype=D))
    assert torch.equal(out[0], out[1]) and not torch.equal(out[0], out[2])
    a = DeformationField(latent_dim=4, hidden=8, seed=1)
    b = DeformationField(latent_dim=4, hidden=8, seed=1)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    with pytest.raises(ShapeMismatchError):
        field(p, torch.ones(5, dtype=D))
    with pytest.raises(ShapeMismatchError):
        deform_vertices(field, np.zeros((4, 3)), torch.ones(4, dtype=D))


def test_dynamics_zero_init_renders_identically(toy):
    cloud = init_cloud(toy.template_vertices, toy.faces, seed=0)
    field = DynamicsField(len(cloud), latent_dim=6, seed=0).to(D)
    res = dynamics_residuals(field, cloud, torch.randn(6, dtype=D))
    for t in (res.position, res.rotation, res.log_scale, res.opacity, res.color):
        assert torch.count_nonzero(t) == 0
    cam = Camera.look_at((0, 0, 0.5), (0, 0, 0), (0, 1, 0), 40, 40, 24, 24)
    v = torch.as_tensor(toy.template_vertices)
    a = render(cloud, v, toy.faces, cam)
    b = render(cloud, v, toy.faces, cam, residuals=res)
    assert torch.equal(a.rgb, b.rgb) and torch.equal(a.normal, b.normal) and torch.equal(a.alpha, b.alpha)
    with pytest.raises(ShapeMismatchError):
        dynamics_residuals(DynamicsField(3, latent_dim=6).to(D), cloud, torch.zeros(6, dtype=D))


def test_dynamics_code_locality():
    field = DynamicsField(5, latent_dim=4, code_dim=3, hidden=8, seed=2).to(D)
    with torch.no_grad():
        field.net[-1].weight.normal_()
    z = torch.randn(4, dtype=D)
    before = field(z)
    with torch.no_grad():
        field.codes[2] += 0.5
    after = field(z)
    for name in ("position", "rotation", "log_scale", "opacity", "color"):
        diff = (getattr(after, name) - getattr(before, name)).reshape(5, -1).abs().sum(1)
        assert diff[2] > 0 and torch.count_nonzero(diff) == 1, name


def test_dynamics_prune():
    field = DynamicsField(5, latent_dim=4, code_dim=3)
    codes = field.codes.detach().clone()
    field.prune(torch.tensor([0, 3]))
    assert torch.equal(field.codes, codes[[0, 3]])


@pytest.mark.parametrize("seed", range(3))
def test_field_gradients(seed):
    assert check_deformation(seed) <= 1e-4
    assert check_dynamics_field(seed) <= 1e-4
