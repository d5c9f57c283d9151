"""Avatar reconstruction from a dataset bundle.

:class:`AvatarReconstructor` fits triangle-bound Gaussians, additive residuals on the
tracked head-model parameters, a per-vertex deformation field and a per-Gaussian
dynamics field to multi-view frames, normals and masks. Every parameter group has its
own three-phase learning-rate schedule and is stepped with Adam.
"""

from __future__ import annotations

import json
import logging
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .bundle import DatasetBundle, load_bundle
from .exceptions import BundleError, NumericalAbort
from .fields import DeformationField, DynamicsField, deform_vertices, dynamics_residuals
from .gaussians import GaussianCloud, init_cloud, triangle_frames
from .geometry import axis_angle_to_matrix
from .head_model import PARAM_NAMES, AvatarParams, canonical_expression_mesh, pose_vertices
from .io.checkpoint import config_hash, load_checkpoint, save_checkpoint
from .io.model_file import model_chunks, model_from_chunks
from .losses import normal_loss, photometric_loss, position_regularizer, scale_regularizer
from .metrics import masked_normal_error, psnr, rotation_parameter_error, ssim
from .remesh import remesh_uv
from .render import Camera, render
from .schedule import GroupSchedule, ScheduleSpec, schedule_rate

log = logging.getLogger(__name__)

DTYPE = torch.float32
GAUSSIAN_GROUPS = ("position", "rotation", "scale", "opacity", "color")
_CLOUD_FIELD = dict(zip(GAUSSIAN_GROUPS, GaussianCloud.TRAINABLE))
_POSE_RESIDUALS = ("joint_rotations", "global_rotation", "translation")
PRUNE_OPACITY = 0.005


class AvatarReconstructor(BaseEstimator):
    """Fit an animatable Gaussian head avatar to a :class:`DatasetBundle`.

    Parameters mirror the training config. Learning rates named ``lr_*`` are peak
    rates; the head-model residual groups (pose, shape, expression) warm up from
    ``lr_start`` while the Gaussian and field groups start at their peak. All groups
    decay exponentially to a hundredth of their peak after ``stable_end_fraction``.

    Fitted attributes: ``model_``, ``remesh_``, ``cloud_``, ``params_``,
    ``deformation_``, ``dynamics_``, ``latents_``, ``iteration_``, ``history_``.
    """

    def __init__(
        self,
        total_iters=2000,
        per_triangle=1,
        remesh_resolution=None,
        max_hops=5,
        lambda_rgb=0.8,
        lambda_ssim=0.2,
        lambda_normal=0.1,
        lambda_position=0.01,
        lambda_scale=1.0,
        lambda_dynamics=1e-3,
        position_threshold=1.0,
        scale_threshold=0.6,
        learn_residuals=True,
        use_deformation=True,
        use_dynamics=True,
        lr_pose=1e-5,
        lr_shape=1e-5,
        lr_expression=1e-4,
        lr_start=1e-10,
        warmup_fraction=0.2,
        stable_end_fraction=0.8,
        lr_position=5e-3,
        lr_rotation=5e-3,
        lr_scale=1e-2,
        lr_opacity=5e-2,
        lr_color=2e-2,
        lr_fields=1e-3,
        field_hidden=64,
        code_dim=16,
        prune_every=0,
        checkpoint_every=0,
        output_dir=None,
        log_every=0,
        seed=0,
    ):
        self.total_iters = total_iters
        self.per_triangle = per_triangle
        self.remesh_resolution = remesh_resolution
        self.max_hops = max_hops
        self.lambda_rgb = lambda_rgb
        self.lambda_ssim = lambda_ssim
        self.lambda_normal = lambda_normal
        self.lambda_position = lambda_position
        self.lambda_scale = lambda_scale
        self.lambda_dynamics = lambda_dynamics
        self.position_threshold = position_threshold
        self.scale_threshold = scale_threshold
        self.learn_residuals = learn_residuals
        self.use_deformation = use_deformation
        self.use_dynamics = use_dynamics
        self.lr_pose = lr_pose
        self.lr_shape = lr_shape
        self.lr_expression = lr_expression
        self.lr_start = lr_start
        self.warmup_fraction = warmup_fraction
        self.stable_end_fraction = stable_end_fraction
        self.lr_position = lr_position
        self.lr_rotation = lr_rotation
        self.lr_scale = lr_scale
        self.lr_opacity = lr_opacity
        self.lr_color = lr_color
        self.lr_fields = lr_fields
        self.field_hidden = field_hidden
        self.code_dim = code_dim
        self.prune_every = prune_every
        self.checkpoint_every = checkpoint_every
        self.output_dir = output_dir
        self.log_every = log_every
        self.seed = seed

    # ------------------------------------------------------------------ setup

    def _validate_params(self):
        if int(self.total_iters) < 0:
            raise ValueError("total_iters must be >= 0")
        for name in ("lambda_rgb", "lambda_ssim", "lambda_normal", "lambda_position", "lambda_scale",
                     "lambda_dynamics"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.warmup_fraction <= self.stable_end_fraction <= 1.0:
            raise ValueError("need 0 <= warmup_fraction <= stable_end_fraction <= 1")

    def schedule_spec(self):
        total = max(int(self.total_iters), 1)
        w, s = self.warmup_fraction, self.stable_end_fraction
        groups = {
            "pose": GroupSchedule(self.lr_pose, start=min(self.lr_start, self.lr_pose), warmup=w, stable_end=s),
            "shape": GroupSchedule(self.lr_shape, start=min(self.lr_start, self.lr_shape), warmup=w, stable_end=s),
            "expression": GroupSchedule(
                self.lr_expression, start=min(self.lr_start, self.lr_expression), warmup=w, stable_end=s
            ),
        }
        for g in GAUSSIAN_GROUPS + ("deformation", "dynamics"):
            rate = self.lr_fields if g in ("deformation", "dynamics") else getattr(self, f"lr_{g}")
            groups[g] = GroupSchedule(rate, start=rate, warmup=0.0, stable_end=s)
        return ScheduleSpec(total, groups)

    def _setup(self, bundle):
        self._validate_params()
        bundle.check_complete()
        H, W = bundle.image_size
        for cam in bundle.cameras:
            if (cam.height, cam.width) != (H, W):
                raise BundleError(f"camera size {cam.width}x{cam.height} does not match images {W}x{H}")
        torch.manual_seed(self.seed)
        self.model_ = bundle.model
        res = self.remesh_resolution or bundle.meta.get("remesh_resolution", 32)
        self.remesh_ = remesh_uv(self.model_, int(res), int(self.max_hops))
        if self.remesh_.n_faces == 0:
            raise BundleError(f"remesh at resolution {res} retained no faces")
        self.background_ = tuple(float(b) for b in bundle.background)
        self.cameras_ = list(bundle.cameras)
        self._set_tracks(bundle.tracks.to_params(DTYPE), bundle.tracks.normalized_latents())
        self.latent_stats_ = (bundle.tracks.latent_mean, bundle.tracks.latent_std)
        cloud = init_cloud(self.remesh_.vertices, self.remesh_.faces, self.per_triangle, seed=self.seed, dtype=DTYPE)
        self.cloud_ = cloud.requires_grad_(True)
        latent_dim = self.latents_.shape[1]
        self.deformation_ = DeformationField(latent_dim, self.field_hidden, seed=self.seed).to(DTYPE)
        self.dynamics_ = DynamicsField(len(cloud), latent_dim, self.code_dim, self.field_hidden, seed=self.seed).to(DTYPE)
        self._build_optimizer()
        self.iteration_ = 0
        self.history_ = []
        self._cache_targets(bundle)

    def _set_tracks(self, params, latents):
        for name in PARAM_NAMES:
            params.residuals[name] = params.residuals[name].detach().clone().requires_grad_(bool(self.learn_residuals))
        self.params_ = params
        self.latents_ = torch.as_tensor(np.asarray(latents), dtype=DTYPE)

    def _cache_targets(self, bundle):
        self._rgb = torch.as_tensor(bundle.rgb, dtype=DTYPE)
        self._normal = torch.as_tensor(bundle.normal, dtype=DTYPE)
        self._mask = torch.as_tensor(bundle.mask, dtype=DTYPE)

    def _group_params(self):
        groups = {g: [getattr(self.cloud_, _CLOUD_FIELD[g])] for g in GAUSSIAN_GROUPS}
        if self.learn_residuals:
            groups["pose"] = [self.params_.residuals[n] for n in _POSE_RESIDUALS]
            groups["shape"] = [self.params_.residuals["shape"]]
            groups["expression"] = [self.params_.residuals["expression"]]
        if self.use_deformation:
            groups["deformation"] = list(self.deformation_.parameters())
        if self.use_dynamics:
            groups["dynamics"] = list(self.dynamics_.parameters())
        return groups

    def _build_optimizer(self):
        groups = self._group_params()
        self.optimizer_ = torch.optim.Adam(
            [{"params": ps, "name": g, "lr": 0.0} for g, ps in groups.items()], betas=(0.9, 0.999), eps=1e-15
        )

    # ---------------------------------------------------------------- forward

    def _forward(self, frame, camera, background=None):
        vals = self.params_.frame_values(frame)
        head = pose_vertices(self.model_, **vals)
        verts = self.remesh_.interpolate(head)
        latent = self.latents_[frame]
        offsets = residuals = None
        if self.use_deformation:
            canon = self.remesh_.interpolate(canonical_expression_mesh(self.model_, vals["expression"], vals["shape"]))
            offsets = deform_vertices(self.deformation_, canon, latent)
            # offsets live in canonical space; carry them along with the global rotation
            verts = verts + offsets @ axis_angle_to_matrix(vals["global_rotation"]).T
        if self.use_dynamics:
            residuals = dynamics_residuals(self.dynamics_, self.cloud_, latent)
        bg = self.background_ if background is None else background
        out = render(self.cloud_, verts, self.remesh_.faces, camera, background_rgb=bg, residuals=residuals)
        return out, verts, offsets, residuals

    def _loss(self, out, verts, offsets, residuals, rgb, normal, mask):
        terms = {
            "photometric": photometric_loss(out.rgb, rgb, self.lambda_rgb, self.lambda_ssim),
            "normal": normal_loss(out.normal, normal, mask, self.lambda_normal)
            if self.lambda_normal > 0 else torch.zeros((), dtype=DTYPE),
            "position": self.lambda_position
            * position_regularizer(self.cloud_.local_position, self.position_threshold),
            "scale": self.lambda_scale * scale_regularizer(self.cloud_.local_log_scale, self.scale_threshold),
        }
        dyn = torch.zeros((), dtype=DTYPE)
        if residuals is not None:
            dyn = dyn + residuals.squared_mean()
        if offsets is not None:
            frames, _ = triangle_frames(verts, self.remesh_.faces)
            unit = frames.scale.detach().mean()
            dyn = dyn + ((offsets / unit) ** 2).mean()
        terms["dynamics"] = self.lambda_dynamics * dyn
        total = sum(terms.values())
        components = {k: float(v.detach().double()) for k, v in terms.items()}
        components["total"] = math.fsum(components.values())
        return total, components

    # ------------------------------------------------------------ training

    def _sample(self, it):
        n_pairs = len(self.cameras_) * self.params_.n_frames
        epoch, pos = divmod(it, n_pairs)
        order = np.random.default_rng([int(self.seed), epoch]).permutation(n_pairs)
        view, frame = divmod(int(order[pos]), self.params_.n_frames)
        return frame, view

    def _rates(self, it):
        spec = self.schedule_spec()
        return {g["name"]: schedule_rate(spec, g["name"], min(it, spec.total)) for g in self.optimizer_.param_groups}

    def _step(self, it):
        frame, view = self._sample(it)
        rates = self._rates(it)
        for g in self.optimizer_.param_groups:
            g["lr"] = rates[g["name"]]
        out, verts, offsets, residuals = self._forward(frame, self.cameras_[view])
        total, comps = self._loss(out, verts, offsets, residuals, self._rgb[view, frame], self._normal[view, frame],
                                  self._mask[view, frame])
        if not all(math.isfinite(v) for v in comps.values()):
            raise NumericalAbort(f"non-finite loss at iteration {it}", self._dump(it, frame, view, comps, rates))
        self.optimizer_.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer_.step()
        self.iteration_ = it + 1
        self.history_.append(comps["total"])
        record = {"event": "step", "iteration": it, "frame": frame, "view": view, "losses": comps, "rates": rates}
        return record

    def _dump(self, it, frame, view, comps, rates):
        out_dir = Path(self.output_dir) if self.output_dir else Path(tempfile.gettempdir())
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"nan_dump_{it:06d}.json"
        stats = {}
        for g, ps in self._group_params().items():
            vals = torch.cat([p.detach().flatten() for p in ps])
            stats[g] = {"finite": bool(torch.isfinite(vals).all()), "min": float(vals.min()), "max": float(vals.max())}
        path.write_text(json.dumps({"iteration": it, "frame": frame, "view": view, "losses": comps,
                                    "rates": rates, "parameters": stats}, indent=1, default=str))
        return path

    def fit(self, X, y=None, resume_from=None):
        """Train on a bundle (object or directory). ``resume_from`` continues a checkpoint."""
        bundle = X if isinstance(X, DatasetBundle) else load_bundle(X)
        self._setup(bundle)
        if resume_from is not None:
            self._restore(*load_checkpoint(resume_from))
        out_dir = Path(self.output_dir) if self.output_dir else None
        log_fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(out_dir / "train_log.jsonl", "a")
            log_fh.write(json.dumps({"event": "config", "params": self.get_params(),
                                     "config_hash": config_hash(self.get_params())}) + "\n")
        start = time.perf_counter()
        try:
            for it in range(self.iteration_, int(self.total_iters)):
                record = self._step(it)
                done = self.iteration_
                if self.prune_every and done % int(self.prune_every) == 0:
                    record["pruned"] = self.prune()
                if log_fh is not None and (self.log_every and (it % int(self.log_every) == 0 or done == self.total_iters)):
                    record["elapsed"] = time.perf_counter() - start
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if out_dir is not None and self.checkpoint_every and done % int(self.checkpoint_every) == 0:
                    self.save(out_dir / f"checkpoint_{done:06d}.gdhm")
        finally:
            if log_fh is not None:
                log_fh.close()
        if out_dir is not None:
            self.save(out_dir / "final.gdhm")
        return self

    # --------------------------------------------------------------- pruning

    def prune(self, threshold=PRUNE_OPACITY):
        """Drop Gaussians whose activated opacity is below ``threshold``; returns the count."""
        with torch.no_grad():
            keep = torch.sigmoid(self.cloud_.opacity_logit) >= threshold
        n_drop = int((~keep).sum())
        if n_drop == 0:
            return 0
        opt = self.optimizer_
        old = [getattr(self.cloud_, n) for n in GaussianCloud.TRAINABLE] + [self.dynamics_.codes]
        new = [p.detach()[keep].clone().requires_grad_(True) for p in old]
        for name, p in zip(GaussianCloud.TRAINABLE, new):
            setattr(self.cloud_, name, p)
        self.cloud_.parent_face = self.cloud_.parent_face[keep]
        self.dynamics_.codes = torch.nn.Parameter(new[-1].detach())
        new[-1] = self.dynamics_.codes
        swap = dict(zip(map(id, old), new))
        for group in opt.param_groups:
            for i, p in enumerate(group["params"]):
                if id(p) in swap:
                    q = swap[id(p)]
                    state = opt.state.pop(p, None)
                    if state:
                        opt.state[q] = {k: (v[keep].clone() if torch.is_tensor(v) and v.ndim > 0 else v)
                                        for k, v in state.items()}
                    group["params"][i] = q
        return n_drop

    # ------------------------------------------------------------ checkpoint

    def _state_arrays(self):
        arrays = {"iteration": np.array([self.iteration_], dtype=np.int32)}
        arrays.update(model_chunks(self.model_, prefix="model/"))
        for k, v in self.cloud_.tensors().items():
            arrays[f"cloud/{k}"] = v.detach().numpy()
        for name in PARAM_NAMES:
            arrays[f"tracks/{name}"] = getattr(self.params_, name).numpy()
            arrays[f"residual/{name}"] = self.params_.residuals[name].detach().numpy()
        arrays["latents"] = self.latents_.numpy()
        arrays["latent_mean"] = np.asarray(self.latent_stats_[0])
        arrays["latent_std"] = np.asarray(self.latent_stats_[1])
        for prefix, module in (("deformation", self.deformation_), ("dynamics", self.dynamics_)):
            for k, v in module.state_dict().items():
                arrays[f"{prefix}/{k}"] = v.detach().numpy().reshape(v.shape)
        for group in self.optimizer_.param_groups:
            for i, p in enumerate(group["params"]):
                for k, v in self.optimizer_.state.get(p, {}).items():
                    arrays[f"adam/{group['name']}/{i}/{k}"] = torch.as_tensor(v).detach().numpy()
        arrays["cameras"] = np.array([[c.fx, c.fy, c.cx, c.cy, *c.rotation.ravel(), *c.translation, c.width, c.height,
                                       c.near] for c in self.cameras_], dtype=np.float64)
        return arrays

    def save(self, path):
        """Write a checkpoint of the full training state."""
        # the output location is not part of the model: leave it out so identical runs
        # in different directories write identical bytes
        config = {"params": {**self.get_params(), "output_dir": None}, "background": list(self.background_),
                  "remesh_resolution": self.remesh_.resolution}
        save_checkpoint(path, self._state_arrays(), config)
        return Path(path)

    def _restore(self, arrays, config):
        t = lambda a: torch.as_tensor(np.asarray(a))  # noqa: E731
        n = arrays["cloud/parent_face"].shape[0]
        cloud = GaussianCloud(**{
            k: (t(arrays[f"cloud/{k}"]).long() if k == "parent_face" else t(arrays[f"cloud/{k}"]).to(DTYPE))
            for k in GaussianCloud.__dataclass_fields__
        })
        self.cloud_ = cloud.requires_grad_(True)
        params = AvatarParams.from_arrays(dtype=DTYPE, **{k: arrays[f"tracks/{k}"] for k in PARAM_NAMES})
        params.residuals = {k: t(arrays[f"residual/{k}"]).to(DTYPE) for k in PARAM_NAMES}
        self._set_tracks(params, arrays["latents"])
        self.latent_stats_ = (arrays["latent_mean"].astype(np.float64), arrays["latent_std"].astype(np.float64))
        latent_dim = self.latents_.shape[1]
        self.deformation_ = DeformationField(latent_dim, self.field_hidden, seed=self.seed).to(DTYPE)
        self.dynamics_ = DynamicsField(n, latent_dim, self.code_dim, self.field_hidden, seed=self.seed).to(DTYPE)
        for prefix, module in (("deformation", self.deformation_), ("dynamics", self.dynamics_)):
            module.load_state_dict({k: t(arrays[f"{prefix}/{k}"]).to(DTYPE).reshape(v.shape)
                                    for k, v in module.state_dict().items()})
        self._build_optimizer()
        for group in self.optimizer_.param_groups:
            for i, p in enumerate(group["params"]):
                key = f"adam/{group['name']}/{i}/"
                state = {k[len(key):]: t(v).to(DTYPE) for k, v in arrays.items() if k.startswith(key)}
                if state:
                    state["step"] = state["step"].reshape(())
                    self.optimizer_.state[p] = state
        self.iteration_ = int(arrays["iteration"][0])

    @classmethod
    def load(cls, path):
        """Rebuild a fitted estimator (ready to render and evaluate) from a checkpoint."""
        arrays, config = load_checkpoint(path)
        est = cls(**config["params"])
        est.model_ = model_from_chunks(arrays, prefix="model/")
        est.remesh_ = remesh_uv(est.model_, int(config["remesh_resolution"]), int(est.max_hops))
        est.background_ = tuple(config["background"])
        cams = []
        for row in arrays["cameras"].astype(np.float64):
            cams.append(Camera(row[0], row[1], row[2], row[3], row[4:13], row[13:16], int(row[16]), int(row[17]),
                               row[18]))
        est.cameras_ = cams
        est.history_ = []
        est._restore(arrays, config)
        return est

    # ------------------------------------------------------------ inference

    def render_frame(self, frame, camera, background=None):
        """Detached :class:`RenderOutput` of the fitted avatar for one frame."""
        with torch.no_grad():
            out, *_ = self._forward(frame, camera, background)
        return out

    def predict(self, X):
        """RGB images (n, H, W, 3) for an iterable of ``(frame, camera)`` pairs."""
        return np.stack([self.render_frame(f, cam).rgb.double().numpy() for f, cam in X])

    def evaluate(self, bundle, frames=None):
        """Per-sample and aggregate PSNR, SSIM and masked normal error on held-out views.

        Falls back to the training views when the bundle carries no held-out set.
        """
        if bundle.holdout is not None:
            cams, rgb, normal, alpha = bundle.holdout.cameras, bundle.holdout.rgb, bundle.holdout.normal, bundle.holdout.alpha
            split = "holdout"
        else:
            cams, rgb, normal, alpha = bundle.cameras, bundle.rgb, bundle.normal, bundle.mask
            split = "train"
        frames = range(rgb.shape[1]) if frames is None else frames
        samples = []
        for v, cam in enumerate(cams):
            for f in frames:
                out = self.render_frame(f, cam)
                pred = out.rgb.double().numpy()
                samples.append({
                    "view": v, "frame": int(f),
                    "psnr": psnr(pred, rgb[v, f]),
                    "ssim": ssim(pred, rgb[v, f]),
                    "normal_error_deg": masked_normal_error(out.normal, normal[v, f], alpha[v, f]),
                })
        normals = [s["normal_error_deg"] for s in samples if s["normal_error_deg"] is not None]
        aggregate = {
            "psnr": float(np.mean([s["psnr"] for s in samples])),
            "ssim": float(np.mean([s["ssim"] for s in samples])),
            "normal_error_deg": float(np.mean(normals)) if normals else None,
            "samples": len(samples),
        }
        return {"split": split, "samples": samples, "aggregate": aggregate}

    def score(self, X, y=None):
        """Mean held-out PSNR (higher is better)."""
        bundle = X if isinstance(X, DatasetBundle) else load_bundle(X)
        return self.evaluate(bundle)["aggregate"]["psnr"]

    def rotation_error(self, tracks):
        """Mean geodesic rotation error (radians) of the effective pose against ``tracks``."""
        eff = lambda n: self.params_.effective(n).detach().double().numpy()  # noqa: E731
        return rotation_parameter_error(eff("global_rotation"), eff("joint_rotations"), tracks.global_rotation,
                                        tracks.joint_rotations, self.model_.joint_parents)
