"""Command-line interface: ``splatgen <command> ...``.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numeric/collapse, 5 provider.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import cv2
import numpy as np

from . import config as run_config
from .body import PoseParams, init_cloud, load_body_model, pose_body, render_skeleton, \
    convert_smplx
from .cloud import read_ply, write_ply
from .density import prune_by_size
from .errors import ParameterError, SplatgenError
from .geometry import camera_from_spherical
from .rasterizer import render
from .toybody import load_toy_body

log = logging.getLogger("splatgen")

EXIT_USAGE = 2
EXIT_IO = 3


def _set_threads(threads):
    if threads is None:
        env = os.environ.get("SPLATGEN_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return
    if threads < 1:
        raise ParameterError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def _load_body(name: str):
    return load_toy_body() if name == "toy" else load_body_model(name)


def _load_pose(path):
    if not path:
        return None
    with np.load(path) as data:
        return PoseParams(**{k: data[k] for k in data.files})


def _background(text: str):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ParameterError(f"--background: cannot parse {text!r}") from None
    if len(values) != 3:
        raise ParameterError("--background takes three comma-separated values")
    return values


def _imwrite(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"cannot write image {path}")


def _to_u8(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def _to_u16(x):
    return np.clip(np.round(np.asarray(x) * 65535.0), 0, 65535).astype(np.uint16)


def _camera_args(p):
    p.add_argument("--distance", type=float, default=1.8)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--fovy", type=float, default=55.0)
    p.add_argument("--size", type=int, default=512)


def _camera(args, target):
    if args.size < 1:
        raise ParameterError("--size must be >= 1")
    return camera_from_spherical(args.distance, args.elevation, args.azimuth, args.fovy,
                                 tuple(float(v) for v in target), args.size, args.size)


def cmd_init(args):
    if args.count < 1:
        raise ParameterError("--count must be >= 1")
    model = _load_body(args.body)
    pose = _load_pose(args.pose)
    cloud = init_cloud(model, pose, args.count, np.random.default_rng(args.seed))
    write_ply(cloud, args.out)
    body = pose_body(model, pose)
    cam = camera_from_spherical(1.8, 0.0, 0.0, 55.0, tuple(body.center), 256, 256)
    preview = Path(args.out).with_suffix(".preview.png")
    _imwrite(preview, _to_u8(render(cloud, cam).alpha))
    print(f"wrote {args.out} ({len(cloud)} Gaussians) and {preview}")


def cmd_render(args):
    cloud = read_ply(args.cloud)
    target = 0.5 * (cloud.means.min(0) + cloud.means.max(0))
    cam = _camera(args, target)
    out = render(cloud, cam, _background(args.background))
    prefix = Path(args.out)
    _imwrite(f"{prefix}_rgb.png", _to_u8(out.rgb))
    _imwrite(f"{prefix}_depth.png", _to_u16(out.depth))
    _imwrite(f"{prefix}_alpha.png", _to_u8(out.alpha))
    print(f"wrote {prefix}_rgb.png, {prefix}_depth.png, {prefix}_alpha.png")


def cmd_skeleton(args):
    model = _load_body(args.body)
    pose = _load_pose(args.pose)
    body = pose_body(model, pose)
    cam = _camera(args, body.center)
    _imwrite(args.out, render_skeleton(model, pose, cam, body=body))
    print(f"wrote {args.out}")


def cmd_prune(args):
    cloud = read_ply(args.cloud)
    out = prune_by_size(cloud, args.scale_threshold)
    write_ply(out, args.out)
    print(f"kept {len(out)} of {len(cloud)} Gaussians -> {args.out}")


def cmd_serve_echo(args):
    from .remote import EchoServer
    server = EchoServer(args.host, args.port)
    print(f"echo score server on {server.url}/v1/score", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


def cmd_convert_smplx(args):
    model = convert_smplx(args.src, args.dst, args.num_betas, args.num_expressions)
    print(f"wrote {args.dst} ({model.num_vertices} vertices, {model.num_joints} joints)")


def _turntable(cloud, center, train_cfg, size):
    frames = []
    for az in np.linspace(-180.0, 180.0, 8, endpoint=False):
        cam = camera_from_spherical(1.8, 0.0, float(az), 55.0, tuple(center), size, size)
        frames.append(render(cloud, cam, train_cfg.background).rgb)
    return np.concatenate(frames, axis=1)


def cmd_optimize(args):
    from .optim import checkpoint_config, train
    if args.resume:
        cfg = run_config.from_dict(checkpoint_config(args.resume))
    elif args.config:
        cfg = run_config.load(args.config)
    else:
        cfg = run_config.RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        import dataclasses
        cfg.train = dataclasses.replace(cfg.train, **overrides)
    if args.out:
        cfg.output.dir = args.out
    problems = cfg.validate()
    if problems:
        from .errors import ConfigError
        raise ConfigError(problems)
    if args.dry_run:
        sys.stdout.write(cfg.dumps())
        return
    model = _load_body(cfg.body.model)
    out_dir = Path(cfg.output.dir)
    views = evaluate = None
    if cfg.provider.kind == "analytic":
        from .reference import build_reference, evaluate as eval_scene
        scene = build_reference(model, size=cfg.train.resolution, num_views=cfg.provider.views,
                                num_heldout=cfg.provider.heldout_views,
                                count=cfg.provider.reference_count,
                                seed=cfg.provider.reference_seed,
                                background=cfg.train.background,
                                depth_norm=cfg.train.depth_norm)
        provider, views = scene.provider(), scene.train_views
        evaluate = lambda cloud: eval_scene(cloud, scene)  # noqa: E731
    else:
        from .remote import RemoteProvider
        provider = RemoteProvider(cfg.provider.endpoint, cfg.provider.timeout)
    result = train(cfg.train, model, provider, views=views, out_dir=out_dir,
                   resume_from=args.resume, evaluate=evaluate,
                   eval_every=cfg.train.checkpoint_every, config_dict=cfg.to_dict())
    write_ply(result.cloud, out_dir / "final.ply")
    strip = _turntable(result.cloud, pose_body(model).center, cfg.train,
                       min(cfg.train.resolution, 256))
    _imwrite(out_dir / "turntable.png", _to_u8(strip))
    last = result.metrics[-1] if result.metrics else {}
    summary = f"finished at iteration {result.iteration}, {len(result.cloud)} Gaussians"
    if "heldout_psnr" in last:
        summary += f", held-out PSNR {last['heldout_psnr']:.2f} dB"
    print(summary)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $SPLATGEN_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="splatgen",
                                     description="Gaussian-splat human avatars from score guidance.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="sample an initial cloud on a body model")
    p.add_argument("--body", default="toy", help="'toy' or a converted body model (.npz)")
    p.add_argument("--pose", help="pose parameters (.npz)")
    p.add_argument("--count", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("render", parents=[common], help="render a cloud to rgb/depth/alpha PNGs")
    p.add_argument("--cloud", required=True)
    _camera_args(p)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("skeleton", parents=[common], help="draw a pose-conditioning map")
    p.add_argument("--body", default="toy")
    p.add_argument("--pose")
    _camera_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_skeleton)

    p = sub.add_parser("optimize", parents=[common], help="run the training loop")
    p.add_argument("--config", help="run configuration (TOML)")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", help="override output.dir")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--dry-run", action="store_true", help="validate and print resolved config")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("prune", parents=[common], help="drop Gaussians above a size threshold")
    p.add_argument("--cloud", required=True)
    p.add_argument("--scale-threshold", type=float, default=0.008)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("serve-echo", parents=[common], help="run the zero-score test server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve_echo)

    p = sub.add_parser("convert-smplx", parents=[common], help="convert an SMPL-X release file")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--num-betas", type=int, default=10)
    p.add_argument("--num-expressions", type=int, default=10)
    p.set_defaults(func=cmd_convert_smplx)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "init" and args.seed is None:
        args.seed = 0
    try:
        _set_threads(args.threads)
        args.func(args)
    except SplatgenError as exc:
        problems = getattr(exc, "problems", None)
        if problems:
            print("error: invalid configuration:", file=sys.stderr)
            for item in problems:
                print(f"  {item}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
