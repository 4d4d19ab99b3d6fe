"""Command line entry point: ``nsurf <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import ast
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, DomainError, Pose
from .fusion import FusionConfig, read_reports_csv, write_reports_csv
from .ingest import DepthRefiner
from .io.dataset import DatasetError, load_dataset, read_intrinsics, save_image_png
from .io.mapio import MapFormatError, load_map, save_map
from .io.metrics import psnr, ssim
from .io.synth import fronto_wall, reference_room, synth_generate
from .nn.bundle import CheckpointError, NetworkBundle, load_checkpoint, save_checkpoint
from .pipeline import (NumericError, SceneCache, TrainConfig, finetune_scene, reconstruct_online, split_views,
                       train)
from .raster import rasterize, raster_stats
from .render import RenderConfig, render_image, render_image_dense_baseline

log = logging.getLogger("nsurf")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
DEFAULT_INTRINSICS = CameraIntrinsics(40.0, 40.0, 23.5, 17.5, 48, 36)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` comments; ``[section]`` headers prefix following keys."""
    out, section = {}, ""
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[section + key] = _parse_value(val)
    return out


def build_config(overrides: dict, seed: int | None = None) -> TrainConfig:
    """TrainConfig with dotted keys (``fusion.delta_depth``) routed to the nested configs."""
    top, nested = {}, {"fusion": {}, "render": {}, "refiner": {}}
    top_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, val in overrides.items():
        head, _, rest = key.partition(".")
        if rest and head in nested:
            nested[head][rest] = val
        elif not rest and key in top_names and key not in nested:
            top[key] = val
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        if "background" in nested["render"]:
            nested["render"]["background"] = tuple(nested["render"]["background"])
        cfg = TrainConfig(fusion=FusionConfig(**nested["fusion"]), render=RenderConfig(**nested["render"]),
                          refiner=DepthRefiner(**nested["refiner"]), **top)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if seed is not None:
        cfg.seed = seed
    return cfg


def _config(args) -> TrainConfig:
    overrides = read_config(args.config) if args.config else {}
    for key in ("stride", "iterations"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "fusion", None):
        overrides["fusion.fusion_scheme"] = args.fusion
    return build_config(overrides, args.seed)


def _frames(path) -> list:
    frames = list(load_dataset(path))
    if not frames:
        raise DatasetError(f"{path}: dataset contains no frames")
    return frames


def cmd_synth(args) -> None:
    intr = CameraIntrinsics(args.width * 40.0 / 48, args.width * 40.0 / 48, (args.width - 1) / 2,
                            (args.height - 1) / 2, args.width, args.height)
    kw = dict(intrinsics=intr, hole_prob=args.hole_prob)
    scene = reference_room(seed=args.scene_seed, **kw) if args.scene == "room" else fronto_wall(args.distance, **kw)
    synth_generate(scene, args.frames, 0 if args.seed is None else args.seed, args.out)
    print(f"wrote {args.frames} frames to {args.out}")


def cmd_reconstruct(args) -> None:
    cfg = _config(args)
    bundle = load_checkpoint(args.checkpoint)
    frames = _frames(args.dataset)
    keyframes, _, _ = split_views(len(frames), cfg)
    smap, reports = reconstruct_online(frames, bundle, cfg, keyframes=keyframes)
    save_map(smap, args.out)
    if args.report:
        write_reports_csv(reports, args.report)
    print(f"{len(keyframes)} keyframes, {len(smap)} surfels -> {args.out}")


def _read_pose(path) -> Pose:
    try:
        return Pose.from_matrix(np.loadtxt(path).reshape(4, 4)).validate(1e-5)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def cmd_render(args) -> None:
    cfg = _config(args)
    smap, bundle = load_map(args.map), load_checkpoint(args.checkpoint)
    intr = read_intrinsics(args.intrinsics) if args.intrinsics else DEFAULT_INTRINSICS
    pose = _read_pose(args.pose_file)
    if args.baseline == "dense":
        img = render_image_dense_baseline(smap, intr, pose, bundle, step=args.step, background=cfg.render.background)
    else:
        img = render_image(smap, intr, pose, bundle, cfg=cfg.render)
    save_image_png(img, args.out)
    print(f"wrote {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.init:
        bundle = load_checkpoint(args.init)
    else:
        bundle = NetworkBundle.initialize(cfg.seed, with_refiner=cfg.refiner.variant == "learned")
    scenes = [SceneCache(_frames(d), cfg, bundle) for d in args.dataset]
    hist = train(scenes, bundle, cfg, log_path=args.log)
    save_checkpoint(bundle, args.out, include_optimizer=True)
    if hist:
        print(f"{len(hist)} steps, final L_render {hist[-1]['L_render']:.6f} -> {args.out}")
    else:
        print(f"0 steps -> {args.out}")


def cmd_finetune(args) -> None:
    cfg = _config(args)
    smap, bundle = load_map(args.map), load_checkpoint(args.checkpoint)
    frames = _frames(args.dataset)
    _, supervision, _ = split_views(len(frames), cfg)
    smap, bundle = finetune_scene(smap, bundle, [frames[i] for i in supervision], cfg)
    save_map(smap, args.out_map)
    save_checkpoint(bundle, args.out_checkpoint)
    print(f"fine-tuned {cfg.iterations} steps -> {args.out_map}, {args.out_checkpoint}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    smap, bundle = load_map(args.map), load_checkpoint(args.checkpoint)
    frames = _frames(args.dataset)
    _, supervision, heldout = split_views(len(frames), cfg)
    views = {"heldout": heldout, "supervision": supervision, "all": range(len(frames))}[args.split]
    rows = []
    for i in views:
        f = frames[i]
        img = render_image(smap, f.intrinsics, f.pose, bundle, cfg=cfg.render)
        rows.append((f.index, psnr(img, f.rgb), ssim(img, f.rgb)))
        if args.render_dir:
            Path(args.render_dir).mkdir(parents=True, exist_ok=True)
            save_image_png(img, Path(args.render_dir) / f"{f.index:06d}.png")
    with open(args.metrics, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "psnr", "ssim"])
        for idx, p, s in rows:
            w.writerow([idx, f"{p:.6f}", f"{s:.6f}"])
    if rows:
        print(f"{args.split}: {len(rows)} views, PSNR {np.mean([r[1] for r in rows]):.3f} dB, "
              f"SSIM {np.mean([r[2] for r in rows]):.4f}")


def cmd_stats(args) -> None:
    rows = read_reports_csv(args.report)
    if not rows:
        raise DatasetError(f"{args.report}: no rows")
    ins = [r["inserted"] for r in rows]
    print(f"keyframes {len(rows)}, final surfels {rows[-1]['total_surfels']}, "
          f"final bytes {rows[-1]['bytes']}, mean ms {np.mean([r['ms'] for r in rows]):.2f}, "
          f"inserted first/last {ins[0]}/{ins[-1]}")
    if args.map and args.dataset:
        smap = load_map(args.map)
        for f in _frames(args.dataset)[::args.every]:
            mean, mx, cov = raster_stats(rasterize(smap, f.intrinsics, f.pose))
            print(f"frame {f.index}: hits/pixel mean {mean:.3f} max {mx} coverage {cov:.3f}")
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        k = np.arange(1, len(rows) + 1)
        fig, ax = plt.subplots(1, 3, figsize=(12, 3.4))
        ax[0].plot(k, [r["total_surfels"] for r in rows], marker="o")
        ax[0].plot(k, np.cumsum([r["merged"] + r["inserted"] for r in rows]), ls="--", label="no fusion")
        ax[0].set(xlabel="keyframe", ylabel="surfels")
        ax[0].legend()
        ax[1].plot(k, [r["bytes"] / 2 ** 20 for r in rows], marker="o")
        ax[1].set(xlabel="keyframe", ylabel="map size (MiB)")
        ax[2].plot(k, [r["ms"] for r in rows], marker="o")
        ax[2].set(xlabel="keyframe", ylabel="integration time (ms)")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=100)
        plt.close(fig)
        print(f"wrote {args.plot}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--config", help="key = value file overriding training/fusion/render settings")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nsurf", description="Online neural-surfel reconstruction and rendering.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="ray trace a synthetic RGB-D dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scene", choices=("room", "wall"), default="room")
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=400)
    s.add_argument("--width", type=int, default=48)
    s.add_argument("--height", type=int, default=36)
    s.add_argument("--hole-prob", type=float, default=0.0)
    s.add_argument("--distance", type=float, default=2.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("reconstruct", parents=[common], help="fuse keyframes into a surfel map")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int)
    s.add_argument("--fusion", choices=("gru", "weighted_sum"))
    s.add_argument("--report")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("render", parents=[common], help="render one view of a map")
    s.add_argument("--map", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pose-file", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--intrinsics", help="intrinsics.txt (default: the 48x36 synthetic camera)")
    s.add_argument("--baseline", choices=("dense",))
    s.add_argument("--step", type=float, default=0.01)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", parents=[common], help="train the networks end to end")
    s.add_argument("--dataset", required=True, action="append")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint to start from")
    s.add_argument("--iterations", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--fusion", choices=("gru", "weighted_sum"))
    s.add_argument("--log", help="training log CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common], help="per-scene fine-tuning of features and renderer")
    s.add_argument("--map", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out-map", required=True)
    s.add_argument("--out-checkpoint", required=True)
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of rendered views")
    s.add_argument("--map", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=("heldout", "supervision", "all"), default="heldout")
    s.add_argument("--metrics", required=True)
    s.add_argument("--render-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="map growth summary and plot")
    s.add_argument("--report", required=True)
    s.add_argument("--plot")
    s.add_argument("--map", help="with --dataset, also print hits-per-pixel statistics")
    s.add_argument("--dataset")
    s.add_argument("--every", type=int, default=10)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"nsurf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"nsurf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, MapFormatError, CheckpointError, DomainError, OSError) as exc:
        print(f"nsurf: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
