"""Linear blendshape head model with linear blend skinning.

The model follows the FLAME layout (template, shape and expression bases, a joint
regressor and per-vertex skinning weights) without pose-corrective blendshapes.
:func:`make_toy_model` builds a procedural stand-in that is small enough for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch

from ._validation import as_tensor, check_vector
from .exceptions import ModelValidationError, NonManifoldError, ShapeMismatchError
from .geometry import axis_angle_to_matrix

PARAM_NAMES = ("shape", "expression", "joint_rotations", "global_rotation", "translation")


@dataclass(eq=False)
class HeadModel:
    template_vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3)
    uv_coords: np.ndarray  # (Vt, 2)
    uv_faces: np.ndarray  # (F, 3)
    shape_basis: np.ndarray  # (V, 3, n_shape)
    expr_basis: np.ndarray  # (V, 3, n_expr)
    joint_positions: np.ndarray  # (J, 3) rest positions
    joint_parents: np.ndarray  # (J,), -1 for the root
    joint_regressor: np.ndarray  # (J, V)
    skin_weights: np.ndarray  # (V, J)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expr(self):
        return self.expr_basis.shape[2]

    @property
    def n_joints(self):
        return self.joint_positions.shape[0]

    def arrays(self):
        """Name -> array mapping of the persistent fields (in declaration order)."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.init}

    def tensors(self, dtype=torch.float64):
        """Torch copies of the float arrays, cached per dtype."""
        if dtype not in self._cache:
            self._cache[dtype] = {
                "template": torch.as_tensor(self.template_vertices, dtype=dtype),
                "shape_basis": torch.as_tensor(self.shape_basis, dtype=dtype),
                "expr_basis": torch.as_tensor(self.expr_basis, dtype=dtype),
                "regressor": torch.as_tensor(self.joint_regressor, dtype=dtype),
                "skin_weights": torch.as_tensor(self.skin_weights, dtype=dtype),
            }
        return self._cache[dtype]

    def validate(self):
        """Check every structural and value invariant; raise on the first violation."""
        V = self.template_vertices.shape[0]
        if self.template_vertices.ndim != 2 or self.template_vertices.shape[1] != 3:
            raise ShapeMismatchError(f"template_vertices must be (V, 3), got {self.template_vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeMismatchError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.uv_faces.shape != self.faces.shape:
            raise ShapeMismatchError(f"uv_faces shape {self.uv_faces.shape} != faces shape {self.faces.shape}")
        if self.uv_coords.ndim != 2 or self.uv_coords.shape[1] != 2:
            raise ShapeMismatchError(f"uv_coords must be (Vt, 2), got {self.uv_coords.shape}")
        for name in ("shape_basis", "expr_basis"):
            basis = getattr(self, name)
            if basis.ndim != 3 or basis.shape[:2] != (V, 3):
                raise ShapeMismatchError(f"{name} must be (V, 3, K) with V={V}, got {basis.shape}")
            if not np.all(np.isfinite(basis)):
                raise ModelValidationError(f"{name} has non-finite entries")
        J = self.joint_positions.shape[0]
        if self.joint_positions.shape != (J, 3) or self.joint_parents.shape != (J,):
            raise ShapeMismatchError("joint_positions must be (J, 3) and joint_parents (J,)")
        if self.joint_regressor.shape != (J, V):
            raise ShapeMismatchError(f"joint_regressor must be ({J}, {V}), got {self.joint_regressor.shape}")
        if self.skin_weights.shape != (V, J):
            raise ShapeMismatchError(f"skin_weights must be ({V}, {J}), got {self.skin_weights.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ShapeMismatchError("face index out of range")
        Vt = self.uv_coords.shape[0]
        if self.uv_faces.size and (self.uv_faces.min() < 0 or self.uv_faces.max() >= Vt):
            raise ShapeMismatchError("uv face index out of range")
        if J == 0 or self.joint_parents[0] != -1 or np.any(self.joint_parents[1:] >= np.arange(1, J)):
            raise ModelValidationError("joint_parents must list the root first and parents before children")
        if np.any(self.joint_parents[1:] < 0):
            raise ModelValidationError("only joint 0 may be a root")
        if np.any(self.skin_weights < 0) or not np.allclose(self.skin_weights.sum(1), 1.0, rtol=0, atol=1e-6):
            raise ModelValidationError("skin_weights rows must be nonnegative and sum to 1")
        if not np.all(np.isfinite(self.template_vertices)):
            raise ModelValidationError("template_vertices has non-finite entries")
        check_manifold(self.faces)
        return self


def check_manifold(faces):
    """Raise :class:`NonManifoldError` if any undirected edge has more than two faces."""
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bad = uniq[counts > 2]
    if len(bad):
        raise NonManifoldError(f"{len(bad)} edge(s) shared by more than two faces, e.g. {tuple(bad[0])}")


@dataclass(eq=False)
class AvatarParams:
    """Tracked per-sequence parameters plus additive learnable residuals.

    ``shape`` is shared across frames; every other field has a leading frame axis.
    Effective values are always ``tracked + residual``.
    """

    shape: torch.Tensor  # (n_shape,)
    expression: torch.Tensor  # (F, n_expr), eyelids folded in
    joint_rotations: torch.Tensor  # (F, J, 3) axis-angle radians
    global_rotation: torch.Tensor  # (F, 3) axis-angle radians
    translation: torch.Tensor  # (F, 3) meters
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in PARAM_NAMES:
            if name not in self.residuals:
                self.residuals[name] = torch.zeros_like(getattr(self, name))

    @classmethod
    def zeros(cls, n_frames, n_shape, n_expr, n_joints, dtype=torch.float64):
        return cls(
            shape=torch.zeros(n_shape, dtype=dtype),
            expression=torch.zeros(n_frames, n_expr, dtype=dtype),
            joint_rotations=torch.zeros(n_frames, n_joints, 3, dtype=dtype),
            global_rotation=torch.zeros(n_frames, 3, dtype=dtype),
            translation=torch.zeros(n_frames, 3, dtype=dtype),
        )

    @classmethod
    def from_arrays(cls, dtype=torch.float64, **arrays):
        return cls(**{k: as_tensor(arrays[k], dtype=dtype).clone() for k in PARAM_NAMES})

    @property
    def n_frames(self):
        return self.expression.shape[0]

    def effective(self, name):
        return getattr(self, name) + self.residuals[name]

    def frame_values(self, frame):
        """Effective parameter values for one frame (shape included)."""
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} out of range [0, {self.n_frames})")
        return {
            "shape": self.effective("shape"),
            "expression": self.effective("expression")[frame],
            "joint_rotations": self.effective("joint_rotations")[frame],
            "global_rotation": self.effective("global_rotation")[frame],
            "translation": self.effective("translation")[frame],
        }

    def to(self, dtype):
        return AvatarParams(
            **{k: getattr(self, k).detach().to(dtype) for k in PARAM_NAMES},
            residuals={k: v.detach().to(dtype) for k, v in self.residuals.items()},
        )


def shaped_vertices(model, shape, expression):
    """Template plus shape and expression blendshapes (no pose)."""
    t = model.tensors(expression.dtype)
    check_vector(shape, model.n_shape, "shape")
    check_vector(expression, model.n_expr, "expression")
    return t["template"] + t["shape_basis"] @ shape + t["expr_basis"] @ expression


def pose_vertices(model, shape, expression, joint_rotations, global_rotation, translation):
    """Blendshapes, then linear blend skinning, then the global rigid transform.

    Skinning is written in displacement form so that zero rotations return the shaped
    vertices bit-exactly.
    """
    dtype = expression.dtype
    if tuple(joint_rotations.shape) != (model.n_joints, 3):
        raise ShapeMismatchError(f"joint_rotations must be ({model.n_joints}, 3), got {tuple(joint_rotations.shape)}")
    check_vector(global_rotation, 3, "global_rotation")
    check_vector(translation, 3, "translation")
    t = model.tensors(dtype)
    v = shaped_vertices(model, shape, expression)
    joints = t["regressor"] @ v
    local = axis_angle_to_matrix(joint_rotations)
    eye = torch.eye(3, dtype=dtype)
    mats, offsets = [], []
    for k, parent in enumerate(model.joint_parents):
        if parent < 0:
            mats.append(local[k])
            offsets.append(torch.zeros(3, dtype=dtype))
        else:
            mats.append(mats[parent] @ local[k])
            offsets.append(offsets[parent] + (mats[parent] - eye) @ (joints[k] - joints[parent]))
    mats = torch.stack(mats)
    offsets = torch.stack(offsets)
    # per joint displacement: (M_k - I)(v - j_k) + c_k
    rel = v[:, None, :] - joints[None, :, :]
    disp = torch.einsum("kij,vkj->vki", mats - eye, rel) + offsets[None]
    v = v + (t["skin_weights"][:, :, None] * disp).sum(1)
    rot = axis_angle_to_matrix(global_rotation)
    return v + v @ (rot - eye).T + translation


def pose_mesh(model, params, frame):
    """Posed vertices (V, 3) for one frame using effective parameters."""
    vals = params.frame_values(frame)
    return pose_vertices(model, **vals)


def canonical_expression_mesh(model, expression, shape=None):
    """Template + expression (and optional sequence shape) offsets, identity pose."""
    expression = as_tensor(expression)
    check_vector(expression, model.n_expr, "expression")
    if shape is None:
        shape = torch.zeros(model.n_shape, dtype=expression.dtype)
    return shaped_vertices(model, as_tensor(shape, like=expression), expression)


def vertex_normals(vertices, faces, return_degenerate=False):
    """Area-weighted vertex normals; isolated or all-degenerate vertices get +z."""
    if isinstance(vertices, torch.Tensor):
        vertices = vertices.detach().cpu().numpy()
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2 * area * unit normal
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm < 1e-300
    out = np.zeros_like(v)
    out[~degenerate] = acc[~degenerate] / norm[~degenerate, None]
    out[degenerate] = (0.0, 0.0, 1.0)
    if return_degenerate:
        return out, degenerate
    return out


# ---------------------------------------------------------------------------
# procedural toy model


def _smooth_field(rng, dirs, n_out, n_terms=8, freq=2.0):
    """Band-limited random functions on the unit sphere, shape (n_dirs, n_out)."""
    omega = rng.normal(0.0, freq, size=(n_out, n_terms, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(n_out, n_terms))
    amp = rng.normal(0.0, 1.0 / np.sqrt(n_terms), size=(n_out, n_terms))
    arg = np.einsum("vd,otd->vot", dirs, omega) + phase[None]
    return (amp[None] * np.cos(arg)).sum(-1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _sphere_layout(n_vertices):
    n_lat = max(3, int(round(np.sqrt(max(n_vertices - 2, 1) / 2.0))))
    n_lon = max(4, int(round((n_vertices - 2) / (n_lat - 1))))
    n_lon += n_lon % 2
    return n_lat, n_lon


def make_toy_model(seed=0, n_vertices=1000, n_shape=100, n_expr=50):
    """Deterministic ellipsoidal head with smooth random blendshapes and a jaw joint.

    The mesh is a latitude/longitude sphere (closed, genus 0). Its UV atlas has two
    charts: the front hemisphere on u in [0, 0.5] and the mirrored back hemisphere on
    u in [0.5, 1], so grid cells straddling u = 0.5 join distant surface regions.
    """
    rng = np.random.default_rng(seed)
    n_vertices = max(12, int(n_vertices))
    n_shape = max(0, int(n_shape))
    n_expr = max(0, int(n_expr))
    n_lat, n_lon = _sphere_layout(n_vertices)

    polar = np.pi * np.arange(1, n_lat) / n_lat
    lon = -np.pi / 2 + 2 * np.pi * np.arange(n_lon) / n_lon
    P, L = np.meshgrid(polar, lon, indexing="ij")
    ring_dirs = np.stack([np.sin(P) * np.sin(L), np.cos(P), np.sin(P) * np.cos(L)], -1).reshape(-1, 3)
    dirs = np.concatenate([[[0.0, 1.0, 0.0]], ring_dirs, [[0.0, -1.0, 0.0]]])
    V = dirs.shape[0]
    top, bottom = 0, V - 1

    def ring(i, j):  # i in [1, n_lat-1], j taken modulo n_lon
        return 1 + (i - 1) * n_lon + (j % n_lon)

    radii = np.array([0.075, 0.1, 0.085])
    bumps = 1.0 + 0.04 * np.tanh(_smooth_field(rng, dirs, 1, freq=1.5)[:, 0])
    template = dirs * radii * bumps[:, None]

    # uv vertices: one column set per chart, then per-face pole vertices
    half = n_lon // 2
    uv = []
    uv_index = {}

    def uv_vertex(chart, i, j):
        key = (chart, i, j)
        if key not in uv_index:
            v = i / n_lat
            u = j / (2.0 * half) if chart == 0 else 1.0 - (j - half) / (2.0 * half)
            uv_index[key] = len(uv)
            uv.append((u, v))
        return uv_index[key]

    def pole_uv(u, v):
        uv.append((u, v))
        return len(uv) - 1

    faces, uv_faces = [], []
    for j in range(n_lon):
        chart = 0 if j < half else 1
        jn = j + 1
        # top cap, bottom cap, then ring quads
        u_mid = 0.5 * (uv[uv_vertex(chart, 1, j)][0] + uv[uv_vertex(chart, 1, jn)][0])
        faces.append((top, ring(1, jn), ring(1, j)))
        uv_faces.append((pole_uv(u_mid, 0.0), uv_vertex(chart, 1, jn), uv_vertex(chart, 1, j)))
        for i in range(1, n_lat - 1):
            a, b, c, d = ring(i, j), ring(i, jn), ring(i + 1, j), ring(i + 1, jn)
            ua, ub = uv_vertex(chart, i, j), uv_vertex(chart, i, jn)
            uc, ud = uv_vertex(chart, i + 1, j), uv_vertex(chart, i + 1, jn)
            faces.append((a, b, c))
            uv_faces.append((ua, ub, uc))
            faces.append((b, d, c))
            uv_faces.append((ub, ud, uc))
        u_mid = 0.5 * (uv[uv_vertex(chart, n_lat - 1, j)][0] + uv[uv_vertex(chart, n_lat - 1, jn)][0])
        faces.append((bottom, ring(n_lat - 1, j), ring(n_lat - 1, jn)))
        uv_faces.append((pole_uv(u_mid, 1.0), uv_vertex(chart, n_lat - 1, j), uv_vertex(chart, n_lat - 1, jn)))
    faces = np.asarray(faces, dtype=np.int64)
    uv_faces = np.asarray(uv_faces, dtype=np.int64)

    # orient outward
    centroid_dir = template[faces].mean(1)
    fn = np.cross(template[faces[:, 1]] - template[faces[:, 0]], template[faces[:, 2]] - template[faces[:, 0]])
    if np.sum(np.einsum("fi,fi->f", fn, centroid_dir) < 0) > len(faces) // 2:
        faces = faces[:, [0, 2, 1]]
        uv_faces = uv_faces[:, [0, 2, 1]]

    jaw = _sigmoid((-0.25 - dirs[:, 1]) / 0.08) * _sigmoid((dirs[:, 2] - 0.1) / 0.1)
    skin = np.stack([1.0 - jaw, jaw], axis=1)
    regressor = np.stack([np.full(V, 1.0 / V), jaw / jaw.sum()])
    joints = regressor @ template

    shape_scale = 0.004
    shape_basis = shape_scale * np.stack(
        [_smooth_field(rng, dirs, 3, freq=1.5) for _ in range(n_shape)], axis=-1
    ) if n_shape else np.zeros((V, 3, 0))
    face_mask = 0.3 + 0.7 * _sigmoid((0.2 - dirs[:, 1]) / 0.15) * _sigmoid(dirs[:, 2] / 0.2)
    expr_basis = 0.004 * face_mask[:, None, None] * np.stack(
        [_smooth_field(rng, dirs, 3, freq=2.5) for _ in range(n_expr)], axis=-1
    ) if n_expr else np.zeros((V, 3, 0))

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    template, shape_basis, expr_basis = f32(template), f32(shape_basis), f32(expr_basis)
    skin, regressor, joints = f32(skin), f32(regressor), f32(joints)
    uv = f32(uv)
    # float32-representable values so the model file round-trips exactly
    model = HeadModel(
        template_vertices=template,
        faces=faces,
        uv_coords=uv,
        uv_faces=uv_faces,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        joint_positions=joints,
        joint_parents=np.array([-1, 0], dtype=np.int64),
        joint_regressor=regressor,
        skin_weights=skin,
    )
    return model.validate()
