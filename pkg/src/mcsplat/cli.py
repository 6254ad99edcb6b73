"""Command-line entry point: train, render, eval, verify.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import verify
from .render import Camera, render
from .scene_io import (CheckpointFormatError, ConfigError, SceneLoadError, TrainConfig, config_from_dict,
                       config_to_text, load_cameras, load_checkpoint, load_config, load_image, load_scene,
                       save_checkpoint, save_image)
from .trainer import Trainer, TrainingAborted, evaluate, format_log, read_log
from .loss import psnr, ssim

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("mcsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag dest -> config key
FLAG_KEYS = {
    "mode": "mode",
    "max_gaussians": "max_gaussians",
    "init_count": "init_count",
    "init": "init_mode",
    "iters": "iterations",
    "seed": "seed",
    "deterministic": "deterministic",
    "lambda_noise": "lambda_noise",
    "lambda_o": "lambda_opacity",
    "lambda_sigma": "lambda_scale",
    "extent_multiplier": "extent_multiplier",
}
INIT_ALIASES = {"random": "random", "ply": "point-cloud", "clustered": "clustered"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcsplat", description="Gaussian splatting with Langevin updates and relocation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="fit a scene or an image")
    t.add_argument("--config", type=Path)
    t.add_argument("--scene", type=Path)
    t.add_argument("--mode", choices=("2d", "3d"))
    t.add_argument("--max-gaussians", type=int)
    t.add_argument("--init-count", type=int)
    t.add_argument("--init", choices=tuple(INIT_ALIASES))
    t.add_argument("--point-cloud", type=Path, help="PLY with x/y/z/red/green/blue for --init ply")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true", default=None)
    t.add_argument("--lambda-noise", type=float)
    t.add_argument("--lambda-o", type=float)
    t.add_argument("--lambda-sigma", type=float)
    t.add_argument("--extent-multiplier", type=float)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume", type=Path, help="training-state sidecar (*.state.npz)")
    t.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("render", help="render a checkpoint")
    r.add_argument("--checkpoint", type=Path, required=True)
    cams = r.add_mutually_exclusive_group(required=True)
    cams.add_argument("--cameras", type=Path, help="transforms manifest")
    cams.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), help="2D identity camera")
    r.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="PSNR / SSIM against a scene")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--renders", type=Path, help="directory of view_XXX.png to score instead of rendering")
    e.add_argument("--scene", type=Path, required=True)
    e.add_argument("--mode", choices=("2d", "3d"), default="3d")
    e.add_argument("--json", action="store_true")

    v = sub.add_parser("verify", help="run the oracle sweeps")
    v.add_argument("--sweep-csv", type=Path)
    v.add_argument("--samples", type=int, default=100_001)
    return p


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    data = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        data.update({k: v for k, v in vars(load_config(args.config)).items()})
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is None:
            continue
        data[key] = INIT_ALIASES[value] if flag == "init" else value
    return config_from_dict(data)


def _write_renders(gaussians, views, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(views):
        save_image(render(gaussians, cam).image, directory / f"view_{i:03d}.png")


def cmd_train(args) -> int:
    if args.scene is None:
        raise UsageError("train: --scene is required")
    config = resolve_config(args)
    if config.init_mode == "point-cloud" and config.mode == "2d" and args.point_cloud is None:
        raise UsageError("--init ply needs --point-cloud in 2d mode")
    dataset = load_scene(args.scene, config.mode, point_cloud=args.point_cloud)
    out = args.out
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config_to_text(config))

    trainer = Trainer.resume(dataset, config, args.resume) if args.resume else Trainer(dataset, config)
    if args.resume and (out / "metrics.csv").exists():
        trainer.log = [r for r in read_log(out / "metrics.csv") if r.iteration <= trainer.iteration]

    def on_step(t):
        if args.checkpoint_every and t.iteration % args.checkpoint_every == 0:
            t.save_state(ckpt_dir / f"iter_{t.iteration:06d}.ply")

    try:
        trainer.run(callback=on_step)
    except TrainingAborted as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, ckpt_dir / "last_good.ply")
        (out / "metrics.csv").write_text(format_log(trainer.log))
        log.error("training aborted: %s (last good state in %s)", exc, ckpt_dir / "last_good.ply")
        return EXIT_RUNTIME
    trainer.save_state(ckpt_dir / "final.ply")
    (out / "metrics.csv").write_text(format_log(trainer.log))
    _write_renders(trainer.gaussians, dataset.cameras, out / "renders")
    final = trainer.log[-1] if trainer.log else None
    if final is not None:
        print(f"iteration {final.iteration}  loss {final.loss_total:.5f}  psnr {final.psnr_train_view:.2f}  "
              f"live {final.live_count}")
    return EXIT_OK


def cmd_render(args) -> int:
    gaussians = load_checkpoint(args.checkpoint)
    if args.cameras is not None:
        views, _, _ = load_cameras(args.cameras, load_images=False)
        cams = [c for c, _ in views]
    else:
        cams = [Camera.identity(*args.image_size)]
    if cams:
        _write_renders(gaussians, cams, args.out)
    print(f"rendered {len(cams)} view(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_scene(args.scene, args.mode)
    if args.renders is not None:
        p, s = [], []
        for i, (_, target) in enumerate(dataset.views):
            img = load_image(args.renders / f"view_{i:03d}.png")
            p.append(psnr(img, target))
            s.append(ssim(img, target))
    elif args.checkpoint is not None:
        report = evaluate(load_checkpoint(args.checkpoint), dataset)
        p, s = report.psnr, report.ssim
    else:
        raise UsageError("eval: need --checkpoint or --renders")
    if args.json:
        print(json.dumps({"psnr": p, "ssim": s}))
    else:
        for i, (a, b) in enumerate(zip(p, s)):
            print(f"view {i:3d}  psnr {a:.4f}  ssim {b:.5f}")
        if p:
            print(f"mean      psnr {sum(p) / len(p):.4f}  ssim {sum(s) / len(s):.5f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_checks(sweep_csv=args.sweep_csv, samples=args.samples)
    print(verify.format_table(results))
    return EXIT_OK if verify.all_passed(results) else EXIT_VERIFY


COMMANDS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneLoadError, CheckpointFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
