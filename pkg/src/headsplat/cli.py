"""Command-line entry point: ``headsplat <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import DataError, NumericalAbort

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. trainer.total_iters=10 (repeatable)")
    return p


def build_parser():
    parser = _Parser(prog="headsplat", description="Triangle-bound Gaussian head avatars.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = _common(sub.add_parser("synth", help="render a synthetic oracle bundle"))
    p.add_argument("--out", type=Path, required=True, help="bundle directory to create")

    p = _common(sub.add_parser("reconstruct", help="fit an avatar to a bundle"))
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory (log, checkpoints)")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = _common(sub.add_parser("render", help="render frames from a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True,
                   help='camera-path JSON: list of camera records (optionally with "frame")')
    p.add_argument("--frame", type=int, default=0, help="frame for records without one")
    p.add_argument("--out", type=Path, required=True)

    p = _common(sub.add_parser("eval", help="metrics of a checkpoint against a bundle"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the JSON report here as well")

    p = _common(sub.add_parser("remesh-check", help="audit UV remeshing against the hop rule"))
    p.add_argument("--model", type=Path, help="GDHM head model (default: toy model)")
    p.add_argument("--resolutions", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--max-hops", type=int, default=5)

    p = _common(sub.add_parser("posemap", help="render a pose map from a bundle's tracks"))
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="16-bit PNG to write")

    p = _common(sub.add_parser("gradcheck", help="run the finite-difference suite"))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--only", nargs="*", help="subset of checks")
    return parser


def _emit(obj):
    print(json.dumps(obj, indent=1, default=float))


def _trainer(config, **extra):
    from .reconstruct import AvatarReconstructor

    params = {**config.get("trainer", {}), **extra}
    valid = AvatarReconstructor().get_params()
    unknown = sorted(set(params) - set(valid))
    if unknown:
        raise UsageError(f"unknown trainer option(s): {', '.join(unknown)}")
    return AvatarReconstructor(**params)


def cmd_synth(args, config):
    from .bundle import write_bundle
    from .synthetic import OracleConfig, generate_oracle_scene

    unknown = sorted(set(config["synth"]) - set(OracleConfig.__dataclass_fields__))
    if unknown:
        raise UsageError(f"unknown synth option(s): {', '.join(unknown)}")
    bundle, truth = generate_oracle_scene(OracleConfig.from_dict(config["synth"]))
    write_bundle(bundle, args.out, truth)
    _emit({"bundle": str(args.out), "views": bundle.n_views, "frames": bundle.n_frames,
           "gaussians": len(truth.cloud), "foreground_fraction": float(bundle.mask.mean())})


def cmd_reconstruct(args, config):
    est = _trainer(config, output_dir=str(args.out))
    est.fit(args.bundle, resume_from=args.resume)
    _emit({"checkpoint": str(args.out / "final.gdhm"), "iterations": est.iteration_,
           "gaussians": len(est.cloud_), "final_loss": est.history_[-1] if est.history_ else None})


def _load_estimator(path):
    from .reconstruct import AvatarReconstructor

    return AvatarReconstructor.load(path)


def cmd_render(args, config):
    from .io import images
    from .render import Camera

    est = _load_estimator(args.checkpoint)
    records = json.loads(args.cameras.read_text())
    if isinstance(records, dict):
        records = records.get("cameras", [])
    args.out.mkdir(parents=True, exist_ok=True)
    n_frames = est.params_.n_frames
    written = []
    for i, rec in enumerate(records):
        frame = int(rec.get("frame", args.frame))
        if not 0 <= frame < n_frames:
            raise DataError(f"camera record {i}: frame {frame} outside [0, {n_frames})")
        out = est.render_frame(frame, Camera.from_dict(rec))
        images.write_rgb(args.out / f"rgb_{i:04d}.png", out.rgb.double().numpy())
        images.write_normal(args.out / f"normal_{i:04d}.png", out.normal.double().numpy())
        images.write_mask(args.out / f"alpha_{i:04d}.png", out.alpha.double().numpy())
        written.append(i)
    _emit({"frames_written": len(written), "out": str(args.out)})


def cmd_eval(args, config):
    from .bundle import load_bundle

    est = _load_estimator(args.checkpoint)
    bundle = load_bundle(args.bundle)
    report = est.evaluate(bundle, frames=config.get("eval", {}).get("frames"))
    if args.out:
        args.out.write_text(json.dumps(report, indent=1))
    _emit(report)


def cmd_remesh_check(args, config):
    from .head_model import make_toy_model
    from .io.model_file import load_model
    from .remesh import audit_remesh, remesh_uv

    model = load_model(args.model) if args.model else make_toy_model(**config.get("model", {}))
    results = {}
    for R in args.resolutions:
        remesh = remesh_uv(model, R, args.max_hops)
        audit = audit_remesh(remesh, model.faces)
        results[str(R)] = {**remesh.statistics(), "violations": len(audit["violations"]),
                           "wrongly_rejected": len(audit["wrongly_rejected"])}
    _emit(results)
    bad = sum(r["violations"] + r["wrongly_rejected"] for r in results.values())
    return EXIT_OK if bad == 0 else EXIT_DATA


def cmd_posemap(args, config):
    from .bundle import load_bundle
    from .io import images
    from .posemap import render_pose_map

    bundle = load_bundle(args.bundle, verify=False)
    if not 0 <= args.view < bundle.n_views or not 0 <= args.frame < bundle.n_frames:
        raise DataError(f"view/frame ({args.view}, {args.frame}) not in bundle")
    image = render_pose_map(bundle.model, bundle.tracks.to_params(), args.frame, bundle.cameras[args.view])
    images.write_normal(args.out, image)
    _emit({"out": str(args.out), "coverage": float(np.any(image != 0, axis=-1).mean())})


def cmd_gradcheck(args, config):
    from .gradcheck import CHECKS, run_suite

    if args.only:
        unknown = sorted(set(args.only) - set(CHECKS))
        if unknown:
            raise UsageError(f"unknown check(s): {', '.join(unknown)}")
    report = run_suite(range(args.seeds), args.only)
    _emit(report)
    return EXIT_OK if all(r["passed"] for r in report.values()) else EXIT_NUMERICAL


COMMANDS = {
    "synth": cmd_synth, "reconstruct": cmd_reconstruct, "render": cmd_render, "eval": cmd_eval,
    "remesh-check": cmd_remesh_check, "posemap": cmd_posemap, "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    from .config import load_config

    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        config = load_config(args.config, args.overrides)
        code = COMMANDS[args.command](args, config)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} (dump: {exc.dump_path})", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry():
    logging.basicConfig(level=logging.WARNING)
    sys.exit(main())


if __name__ == "__main__":
    entry()
