"""Synthetic oracle scenes and the priority-by-size dataset sampler.

``generate_oracle_scene`` builds a toy head, a ground-truth Gaussian avatar on its
UV remesh and a smooth expression/pose track, then renders every (view, frame) with
the splat renderer. The result is the same :class:`DatasetBundle` the reconstructor
reads from disk, plus a :class:`GroundTruth` kept aside for evaluation.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundle import DatasetBundle, Holdout, Tracks
from .exceptions import DataError
from .gaussians import GaussianCloud, init_cloud
from .head_model import pose_mesh
from .io.gdhm import read_gdhm, write_gdhm
from .posemap import render_pose_map
from .remesh import remesh_uv
from .render import Camera, render


@dataclass(frozen=True)
class SamplerWeights:
    priorities: tuple
    sizes: tuple
    probabilities: np.ndarray


def sampler_probabilities(datasets):
    """p_i = priority_i * size_i / sum_j priority_j * size_j."""
    pairs = [(float(p), float(s)) for p, s in datasets]
    if not pairs:
        raise ValueError("need at least one dataset")
    if any(p < 0 or s < 0 for p, s in pairs):
        raise ValueError("priorities and sizes must be >= 0")
    w = np.array([p * s for p, s in pairs], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("every dataset has zero weight (priority * size)")
    return SamplerWeights(tuple(p for p, _ in pairs), tuple(s for _, s in pairs), w / total)


def draw_sample(weights, rng):
    """Index of one dataset drawn according to ``weights.probabilities``."""
    p = weights.probabilities
    if len(p) == 1:
        return 0
    # inverse CDF on a single uniform keeps one draw per call
    idx = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return min(idx, len(p) - 1)


@dataclass(frozen=True)
class OracleConfig:
    seed: int = 0
    views: int = 12
    frames: int = 40
    resolution: int = 128
    holdout_views: int = 1
    n_vertices: int = 250
    n_shape: int = 10
    n_expr: int = 10
    remesh_resolution: int = 17
    max_hops: int = 5
    latent_dim: int = 32
    camera_distance: float = 0.55
    focal_scale: float = 2.0  # focal length in units of the image width
    background: tuple = (0.0, 0.0, 0.0)
    expression_amplitude: float = 1.0
    rotation_amplitude: float = 0.15
    jaw_amplitude: float = 0.12
    translation_amplitude: float = 0.003
    track_noise: bool = False
    noise_rotation: float = 0.02
    noise_expression: float = 0.05

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "background" in known:
            known["background"] = tuple(known["background"])
        return cls(**known)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(eq=False)
class GroundTruth:
    """Hidden state of an oracle scene: avatar, clean tracks and held-out renders."""

    cloud: GaussianCloud
    tracks: Tracks
    remesh_resolution: int
    max_hops: int
    holdout: Holdout | None = None
    config: dict = field(default_factory=dict)

    def write(self, path):
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        chunks = {k: v.detach().numpy() for k, v in self.cloud.tensors().items()}
        chunks["parent_face"] = chunks["parent_face"].astype(np.int32)
        chunks = {k: (v if v.dtype.kind == "i" else v.astype(np.float32)) for k, v in chunks.items()}
        write_gdhm(root / "avatar.gdhm", chunks)
        meta = {"remesh_resolution": self.remesh_resolution, "max_hops": self.max_hops, "config": self.config}
        (root / "ground_truth.json").write_text(json.dumps({"meta": meta, "tracks": self.tracks.to_json()}))
        if self.holdout is not None:
            h = self.holdout
            np.savez(root / "holdout.npz", rgb=h.rgb.astype(np.float32), normal=h.normal.astype(np.float32),
                     alpha=h.alpha.astype(np.float32))
            (root / "holdout_cameras.json").write_text(json.dumps({"cameras": [c.to_dict() for c in h.cameras]}))

    @classmethod
    def read(cls, path, dtype=torch.float64):
        from .bundle import load_holdout

        root = Path(path)
        chunks = read_gdhm(root / "avatar.gdhm")
        cloud = GaussianCloud(**{
            k: torch.as_tensor(v.astype(np.int64)) if k == "parent_face" else torch.as_tensor(v.astype(np.float64)).to(dtype)
            for k, v in chunks.items()
        })
        data = json.loads((root / "ground_truth.json").read_text())
        holdout = load_holdout(root) if (root / "holdout.npz").exists() else None
        meta = data["meta"]
        return cls(cloud, Tracks.from_json(data["tracks"]), meta["remesh_resolution"], meta["max_hops"],
                   holdout, meta.get("config", {}))


def ring_cameras(n, resolution, distance=0.55, focal_scale=2.0, offset=0.0, height=0.02):
    """``n`` cameras on a horizontal ring around the origin, looking at the head."""
    cams = []
    f = focal_scale * resolution
    for k in range(n):
        yaw = 2.0 * math.pi * (k + offset) / n
        eye = (distance * math.sin(yaw), height, distance * math.cos(yaw))
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), f, f, resolution, resolution))
    return cams


def _smooth_track(rng, n_frames, n_dims, amplitude, n_terms=3):
    t = np.arange(n_frames)[:, None, None] / max(n_frames, 1)
    freq = rng.uniform(0.5, 2.0, size=(1, n_dims, n_terms))
    phase = rng.uniform(0, 2 * np.pi, size=(1, n_dims, n_terms))
    amp = rng.normal(size=(1, n_dims, n_terms)) / np.sqrt(n_terms)
    return amplitude * (amp * np.sin(2 * np.pi * freq * t + phase)).sum(-1)


def _ground_truth_cloud(rng, model, remesh):
    cloud = init_cloud(remesh.vertices, remesh.faces, per_triangle=1)
    n = len(cloud)
    p = torch.as_tensor(remesh.vertices)[torch.as_tensor(remesh.faces)].mean(1).numpy()
    offset = np.zeros((n, 3))
    offset[:, [0, 2]] = rng.uniform(-0.15, 0.15, size=(n, 2))
    # flat Gaussians: local axis 1 is the triangle normal; spin about it, slight tilt
    spin = rng.uniform(-np.pi, np.pi, size=n)
    tilt = rng.normal(scale=0.05, size=(n, 2))
    q = np.stack([np.cos(spin / 2), tilt[:, 0], np.sin(spin / 2), tilt[:, 1]], -1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scale = np.stack([rng.uniform(0.45, 0.75, n), rng.uniform(0.08, 0.12, n), rng.uniform(0.45, 0.75, n)], -1)
    opacity = rng.uniform(0.9, 0.98, size=n)
    # a smooth base colour plus a finer band and per-Gaussian speckle, so that a
    # pixel-scale misalignment is visible in the images
    wave = rng.normal(size=(4, 3, 3)) * 25.0
    phase = rng.uniform(0, 2 * np.pi, size=(4, 3))
    smooth = sum(np.sin(p @ wave[k] + phase[k]) for k in range(4)) / 2.0
    fine = np.sin(p @ (rng.normal(size=(3, 3)) * 90.0) + rng.uniform(0, 2 * np.pi, size=3))
    color_logit = smooth + 0.8 * fine + 0.6 * rng.normal(size=(n, 3))
    d = torch.float64
    return GaussianCloud(
        parent_face=cloud.parent_face,
        local_position=torch.as_tensor(offset, dtype=d),
        local_rotation=torch.as_tensor(q, dtype=d),
        local_log_scale=torch.as_tensor(np.log(scale), dtype=d),
        opacity_logit=torch.as_tensor(np.log(opacity / (1 - opacity)), dtype=d),
        color_logit=torch.as_tensor(color_logit, dtype=d),
    )


def render_avatar(model, remesh, cloud, params, frame, camera, background=(0.0, 0.0, 0.0)):
    """Render a triangle-bound cloud for one frame (no fields); numpy rgb, normal, alpha."""
    with torch.no_grad():
        verts = remesh.interpolate(pose_mesh(model, params, frame).to(cloud.dtype))
        out = render(cloud, verts, remesh.faces, camera, background_rgb=background)
    return out.rgb.numpy(), out.normal.numpy(), out.alpha.numpy()


def generate_oracle_scene(config=None, **overrides):
    """Render a ground-truth avatar into a dataset bundle.

    Returns ``(bundle, ground_truth)``. ``config`` is an :class:`OracleConfig` or a
    dict; keyword overrides win.
    """
    from .head_model import make_toy_model

    if config is None:
        config = OracleConfig()
    elif isinstance(config, dict):
        config = OracleConfig.from_dict(config)
    if overrides:
        config = OracleConfig.from_dict({**config.to_dict(), **overrides})
    cfg = config
    if cfg.views < 1 or cfg.frames < 1:
        raise ValueError("views and frames must be >= 1")
    if cfg.resolution < 1:
        raise ValueError("resolution must be >= 1")
    rng = np.random.default_rng(cfg.seed)

    model = make_toy_model(seed=cfg.seed, n_vertices=cfg.n_vertices, n_shape=cfg.n_shape, n_expr=cfg.n_expr)
    remesh = remesh_uv(model, cfg.remesh_resolution, cfg.max_hops)
    cloud = _ground_truth_cloud(rng, model, remesh)

    F = cfg.frames
    shape = 0.5 * rng.normal(size=model.n_shape)
    expression = _smooth_track(rng, F, model.n_expr, cfg.expression_amplitude)
    glob = _smooth_track(rng, F, 3, cfg.rotation_amplitude) * np.array([0.6, 1.0, 0.3])
    joints = np.zeros((F, model.n_joints, 3))
    joints[:, 0] = _smooth_track(rng, F, 3, 0.3 * cfg.rotation_amplitude)
    if model.n_joints > 1:
        joints[:, 1, 0] = cfg.jaw_amplitude * 0.5 * (1 + np.tanh(_smooth_track(rng, F, 1, 2.0)[:, 0]))
    translation = _smooth_track(rng, F, 3, cfg.translation_amplitude)
    latent_map = rng.normal(size=(cfg.latent_dim, model.n_expr)) / np.sqrt(max(model.n_expr, 1))
    latents = expression @ latent_map.T
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
    gt_tracks = Tracks(f32(shape), f32(expression), f32(joints), f32(glob), f32(translation), f32(latents))

    written = gt_tracks
    if cfg.track_noise:
        nrng = np.random.default_rng([cfg.seed, 1])
        written = Tracks(
            gt_tracks.shape.copy(),
            f32(expression + nrng.normal(scale=cfg.noise_expression, size=expression.shape)),
            f32(joints + nrng.normal(scale=cfg.noise_rotation, size=joints.shape)),
            f32(glob + nrng.normal(scale=cfg.noise_rotation, size=glob.shape)),
            gt_tracks.translation.copy(),
            gt_tracks.latents.copy(),
            gt_tracks.latent_mean,
            gt_tracks.latent_std,
        )

    cameras = ring_cameras(cfg.views, cfg.resolution, cfg.camera_distance, cfg.focal_scale)
    gt_params = gt_tracks.to_params()
    tracked_params = written.to_params()
    H = W = cfg.resolution
    shape5 = (cfg.views, F, H, W)
    rgb, normal, alpha = np.zeros(shape5 + (3,)), np.zeros(shape5 + (3,)), np.zeros(shape5)
    posemap = np.zeros(shape5 + (3,))
    for v, cam in enumerate(cameras):
        for f in range(F):
            rgb[v, f], normal[v, f], alpha[v, f] = render_avatar(model, remesh, cloud, gt_params, f, cam, cfg.background)
            posemap[v, f] = render_pose_map(model, tracked_params, f, cam)
    mask = (alpha > 0.5).astype(np.float64)
    if not mask.any():
        warnings.warn(f"resolution {cfg.resolution} leaves no foreground pixel in any view", stacklevel=2)
        raise DataError("oracle scene has no foreground coverage; increase the resolution")

    holdout = None
    if cfg.holdout_views > 0:
        hcams = ring_cameras(cfg.views, cfg.resolution, cfg.camera_distance, cfg.focal_scale, offset=0.5)
        hcams = hcams[: cfg.holdout_views]
        hshape = (len(hcams), F, H, W)
        h_rgb, h_n, h_a = np.zeros(hshape + (3,)), np.zeros(hshape + (3,)), np.zeros(hshape)
        for v, cam in enumerate(hcams):
            for f in range(F):
                h_rgb[v, f], h_n[v, f], h_a[v, f] = render_avatar(model, remesh, cloud, gt_params, f, cam, cfg.background)
        holdout = Holdout(hcams, h_rgb, h_n, h_a)

    meta = {"remesh_resolution": cfg.remesh_resolution, "max_hops": cfg.max_hops, "oracle": cfg.to_dict()}
    bundle = DatasetBundle(model, cameras, written, rgb, normal, mask, posemap, tuple(cfg.background), meta, holdout)
    truth = GroundTruth(cloud, gt_tracks, cfg.remesh_resolution, cfg.max_hops, holdout, cfg.to_dict())
    return bundle, truth
