"""Dataset bundles on disk.

Layout::

    manifest.json       counts, image size, background, sha256 of every file below
    model.gdhm          head model
    cameras.json        {"cameras": [camera, ...]}
    tracks.json         {"shape": [...], "frames": [{expression, joint_rotations,
                         global_rotation, translation, latent}, ...],
                         "latent_stats": {"mean": [...], "std": [...]}}
    rgb/v{VV}_f{FFFF}.png       8-bit RGB
    normal/v{VV}_f{FFFF}.png    16-bit RGB, round((n * 0.5 + 0.5) * 65535)
    mask/v{VV}_f{FFFF}.png      8-bit gray
    posemap/v{VV}_f{FFFF}.png   16-bit RGB, same encoding as normals
    gt/                 optional ground truth (not covered by the manifest)

The manifest is written last and acts as the commit marker.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import BundleError
from .head_model import PARAM_NAMES, AvatarParams
from .io import images
from .io.model_file import load_model, save_model
from .render import Camera

MODALITIES = ("rgb", "normal", "mask", "posemap")
FORMAT = "headsplat-bundle"


def sample_name(view, frame):
    return f"v{view:02d}_f{frame:04d}.png"


@dataclass(eq=False)
class Tracks:
    """Per-frame tracked head-model parameters and expression latents (numpy)."""

    shape: np.ndarray  # (n_shape,)
    expression: np.ndarray  # (F, n_expr)
    joint_rotations: np.ndarray  # (F, J, 3)
    global_rotation: np.ndarray  # (F, 3)
    translation: np.ndarray  # (F, 3)
    latents: np.ndarray  # (F, d)
    latent_mean: np.ndarray = None
    latent_std: np.ndarray = None

    def __post_init__(self):
        if self.latent_mean is None:
            self.latent_mean = self.latents.mean(0)
        if self.latent_std is None:
            self.latent_std = self.latents.std(0)

    @property
    def n_frames(self):
        return self.expression.shape[0]

    def normalized_latents(self):
        return (self.latents - self.latent_mean) / np.maximum(self.latent_std, 1e-6)

    def to_params(self, dtype=None):
        import torch

        return AvatarParams.from_arrays(
            dtype=dtype or torch.float64, **{k: getattr(self, k) for k in PARAM_NAMES}
        )

    def to_json(self):
        return {
            "shape": self.shape.tolist(),
            "frames": [
                {
                    "expression": self.expression[f].tolist(),
                    "joint_rotations": self.joint_rotations[f].tolist(),
                    "global_rotation": self.global_rotation[f].tolist(),
                    "translation": self.translation[f].tolist(),
                    "latent": self.latents[f].tolist(),
                }
                for f in range(self.n_frames)
            ],
            "latent_stats": {"mean": self.latent_mean.tolist(), "std": self.latent_std.tolist()},
        }

    @classmethod
    def from_json(cls, d):
        frames = d["frames"]
        get = lambda k: np.asarray([fr[k] for fr in frames], dtype=np.float64)  # noqa: E731
        stats = d.get("latent_stats", {})
        return cls(
            shape=np.asarray(d["shape"], dtype=np.float64),
            expression=get("expression"),
            joint_rotations=get("joint_rotations"),
            global_rotation=get("global_rotation"),
            translation=get("translation"),
            latents=get("latent"),
            latent_mean=np.asarray(stats["mean"]) if "mean" in stats else None,
            latent_std=np.asarray(stats["std"]) if "std" in stats else None,
        )


@dataclass(eq=False)
class Holdout:
    """Evaluation views rendered from the ground-truth avatar."""

    cameras: list
    rgb: np.ndarray  # (Vh, F, H, W, 3)
    normal: np.ndarray  # (Vh, F, H, W, 3)
    alpha: np.ndarray  # (Vh, F, H, W)


@dataclass(eq=False)
class DatasetBundle:
    model: object
    cameras: list
    tracks: Tracks
    rgb: np.ndarray  # (V, F, H, W, 3)
    normal: np.ndarray  # (V, F, H, W, 3)
    mask: np.ndarray  # (V, F, H, W)
    posemap: np.ndarray | None = None  # (V, F, H, W, 3)
    background: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)
    holdout: Holdout | None = None
    root: Path | None = None

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def n_frames(self):
        return self.tracks.n_frames

    @property
    def image_size(self):
        return self.rgb.shape[2], self.rgb.shape[3]

    def check_complete(self):
        V, F = self.n_views, self.n_frames
        for name in ("rgb", "normal", "mask"):
            arr = getattr(self, name)
            if arr is None or arr.shape[:2] != (V, F):
                raise BundleError(f"modality {name!r} does not cover all {V} x {F} samples")
        return self


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_bundle(bundle, path, ground_truth=None):
    """Write ``bundle`` (and optional ground truth) to ``path``; manifest last."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    files = []
    save_model(bundle.model, root / "model.gdhm")
    files.append("model.gdhm")
    (root / "cameras.json").write_text(json.dumps({"cameras": [c.to_dict() for c in bundle.cameras]}, indent=1))
    files.append("cameras.json")
    (root / "tracks.json").write_text(json.dumps(bundle.tracks.to_json()))
    files.append("tracks.json")
    for v in range(bundle.n_views):
        for f in range(bundle.n_frames):
            name = sample_name(v, f)
            images.write_rgb(root / "rgb" / name, bundle.rgb[v, f])
            images.write_normal(root / "normal" / name, bundle.normal[v, f])
            images.write_mask(root / "mask" / name, bundle.mask[v, f])
            files += [f"rgb/{name}", f"normal/{name}", f"mask/{name}"]
            if bundle.posemap is not None:
                images.write_normal(root / "posemap" / name, bundle.posemap[v, f])
                files.append(f"posemap/{name}")
    if ground_truth is not None:
        ground_truth.write(root / "gt")
    H, W = bundle.image_size
    manifest = {
        "format": FORMAT,
        "version": 1,
        "views": bundle.n_views,
        "frames": bundle.n_frames,
        "height": H,
        "width": W,
        "background": list(map(float, bundle.background)),
        "modalities": list(MODALITIES if bundle.posemap is not None else MODALITIES[:3]),
        "meta": bundle.meta,
        "files": {name: _sha256(root / name) for name in files},
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return root


def load_bundle(path, verify=True, load_posemaps=False):
    """Load a bundle, checking completeness and (optionally) file hashes."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"{root}: no manifest.json (incomplete or not a bundle)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise BundleError(f"{root}: unknown bundle format {manifest.get('format')!r}")
    V, F = manifest["views"], manifest["frames"]
    expected = ["model.gdhm", "cameras.json", "tracks.json"]
    for v in range(V):
        for f in range(F):
            expected += [f"{m}/{sample_name(v, f)}" for m in manifest["modalities"]]
    for name in expected:
        if not (root / name).exists():
            raise BundleError(f"{root}: missing file {name}")
        if name not in manifest["files"]:
            raise BundleError(f"{root}: manifest has no hash for {name}")
        if verify and _sha256(root / name) != manifest["files"][name]:
            raise BundleError(f"{root}: hash mismatch for {name}")
    model = load_model(root / "model.gdhm")
    cameras = [Camera.from_dict(c) for c in json.loads((root / "cameras.json").read_text())["cameras"]]
    tracks = Tracks.from_json(json.loads((root / "tracks.json").read_text()))
    if len(cameras) != V or tracks.n_frames != F:
        raise BundleError(f"{root}: manifest counts disagree with cameras/tracks")

    def stack(mod, reader):
        return np.stack([np.stack([reader(root / mod / sample_name(v, f)) for f in range(F)]) for v in range(V)])

    posemap = stack("posemap", images.read_normal) if load_posemaps and "posemap" in manifest["modalities"] else None
    holdout = None
    if (root / "gt" / "holdout.npz").exists():
        holdout = load_holdout(root / "gt")
    return DatasetBundle(
        model=model,
        cameras=cameras,
        tracks=tracks,
        rgb=stack("rgb", images.read_rgb),
        normal=stack("normal", images.read_normal),
        mask=stack("mask", images.read_mask),
        posemap=posemap,
        background=tuple(manifest["background"]),
        meta=manifest.get("meta", {}),
        holdout=holdout,
        root=root,
    ).check_complete()


def load_holdout(gt_dir):
    gt_dir = Path(gt_dir)
    data = np.load(gt_dir / "holdout.npz")
    cams = [Camera.from_dict(c) for c in json.loads((gt_dir / "holdout_cameras.json").read_text())["cameras"]]
    return Holdout(cams, data["rgb"].astype(np.float64), data["normal"].astype(np.float64), data["alpha"].astype(np.float64))
