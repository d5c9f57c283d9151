import numpy as np
import pytest
import torch

from headsplat.head_model import HeadModel, make_toy_model
from headsplat.synthetic import generate_oracle_scene

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy():
    return make_toy_model(seed=0, n_vertices=250, n_shape=6, n_expr=5)


@pytest.fixture(scope="session")
def tiny_scene():
    """2 views x 3 frames at 48 px, with a held-out view."""
    return generate_oracle_scene(views=2, frames=3, resolution=48, holdout_views=1, seed=1)


def fan_model(n_triangles=7, span_deg=350.0):
    """An open triangle fan whose first and last triangles nearly touch in UV.

    Consecutive triangles share an edge, so the ends are ``n_triangles - 1`` hops
    apart while only a thin empty wedge separates them in the UV atlas.
    """
    angles = np.radians(np.linspace(0.0, span_deg, n_triangles + 1))
    rim = np.stack([np.cos(angles), np.sin(angles)], -1)
    uv = np.concatenate([[[0.5, 0.5]], 0.5 + 0.45 * rim])
    verts = np.concatenate([uv - 0.5, np.zeros((len(uv), 1))], axis=1) * 0.2
    faces = np.array([[0, i + 1, i + 2] for i in range(n_triangles)])
    V = len(verts)
    return HeadModel(
        template_vertices=verts,
        faces=faces,
        uv_coords=uv,
        uv_faces=faces.copy(),
        shape_basis=np.zeros((V, 3, 0)),
        expr_basis=np.zeros((V, 3, 0)),
        joint_positions=np.zeros((1, 3)),
        joint_parents=np.array([-1]),
        joint_regressor=np.full((1, V), 1.0 / V),
        skin_weights=np.ones((V, 1)),
    ).validate()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
