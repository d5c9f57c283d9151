"""Triangle-bound 3D Gaussian head avatars.

Head model and skinning (:mod:`.head_model`), UV remeshing (:mod:`.remesh`), Gaussian
clouds bound to triangles (:mod:`.gaussians`), a tiled differentiable splat renderer
(:mod:`.render`), expression-conditioned fields (:mod:`.fields`), the reconstruction
loop (:mod:`.reconstruct`), the synthetic oracle (:mod:`.synthetic`), metrics and
file formats.
"""

from .bundle import DatasetBundle, load_bundle, write_bundle
from .exceptions import DataError, NumericalAbort
from .gaussians import GaussianCloud, init_cloud, promote_to_world
from .head_model import AvatarParams, HeadModel, make_toy_model, pose_mesh
from .reconstruct import AvatarReconstructor
from .remesh import remesh_uv
from .render import Camera, RenderOutput, render
from .synthetic import draw_sample, generate_oracle_scene, sampler_probabilities

__version__ = "0.1.0"

__all__ = [
    "AvatarParams", "AvatarReconstructor", "Camera", "DataError", "DatasetBundle", "GaussianCloud",
    "HeadModel", "NumericalAbort", "RenderOutput", "draw_sample", "generate_oracle_scene", "init_cloud",
    "load_bundle", "make_toy_model", "pose_mesh", "promote_to_world", "remesh_uv", "render",
    "sampler_probabilities", "write_bundle",
]
