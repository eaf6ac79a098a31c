"""Command line: generate, train, eval, export.

Exit codes: 0 ok, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import metrics, refine, synth
from .bundle_io import read_blob, read_bundle, write_blob, write_bundle
from .errors import MbDepthError
from .neural import save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 2 or h < 2:
        raise argparse.ArgumentTypeError("resolution must be at least 2x2")
    return w, h


def _scene(spec: str) -> synth.SceneSpec:
    """A preset name or a path to a JSON scene description."""
    if spec in synth.PRESETS:
        return synth.scene_preset(spec)
    p = Path(spec)
    if not p.is_file():
        raise UsageError(f"unknown scene {spec!r}; presets: {', '.join(sorted(synth.PRESETS))}")
    return synth.SceneSpec.from_dict(json.loads(p.read_text()))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mbdepth", description="Multi-frame depth refinement from handheld tremor.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic bundle")
    g.add_argument("--scene", required=True, help="preset name or scene JSON file")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--res", type=_resolution, default=synth.DEFAULT_SIZE, help="WxH")

    t = sub.add_parser("train", help="refine the reference depth of a bundle")
    t.add_argument("--bundle", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--alpha", type=float, default=None)
    t.add_argument("--patch-k", type=int, default=11)
    t.add_argument("--samples", type=int, default=4096)
    t.add_argument("--stride", type=int, default=1)
    t.add_argument("--no-lidar", action="store_true")
    t.add_argument("--direct-depth", action="store_true")
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score a depth map against a bundle")
    e.add_argument("--bundle", required=True)
    e.add_argument("--depth", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--pair", action="append", default=[], help="extra depth blob sharing the sample set")

    x = sub.add_parser("export", help="write normals / PFM from a depth blob")
    x.add_argument("--depth", required=True)
    x.add_argument("--normals")
    x.add_argument("--pfm")
    x.add_argument("--bundle", help="bundle supplying intrinsics for normals")
    return ap


def cmd_generate(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    scene = _scene(args.scene)
    W, H = args.res
    Wd = max(2, round(W * synth.DEFAULT_DEPTH_SIZE[0] / synth.DEFAULT_SIZE[0]))
    Hd = max(2, round(H * synth.DEFAULT_DEPTH_SIZE[1] / synth.DEFAULT_SIZE[1]))
    tremor = synth.TremorParams(n_frames=args.frames, seed=args.seed)
    bundle = synth.render_synthetic_bundle(scene, tremor, size=(W, H), depth_size=(Wd, Hd), seed=args.seed)
    write_bundle(bundle, args.out)
    print(f"wrote {len(bundle)} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.epochs < 0 or args.samples < 1 or args.stride < 1 or args.patch_k < 0:
        raise UsageError("--epochs >= 0, --samples >= 1, --stride >= 1, --patch-k >= 0 required")
    kw = dict(
        epochs=args.epochs,
        patch_k=args.patch_k,
        samples=args.samples,
        frame_stride=args.stride,
        direct_depth=args.direct_depth,
        seed=args.seed,
    )
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    config = refine.TrainConfig.no_lidar(**kw) if args.no_lidar else refine.TrainConfig(**kw)
    bundle = read_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    log_path.write_text("")
    t0 = time.perf_counter()
    result = refine.train(bundle, config, log_path=log_path)
    prepared = refine.prepare_bundle(bundle, config)
    z_avg = refine.compute_z_avg(prepared)
    depth = refine.reconstruct(result.params, result.confidence, prepared, z_avg, config)
    save_checkpoint(result.params, out / "mlp.ckpt")
    write_blob(out / "confidence.bin", result.confidence.values)
    write_blob(out / "z_avg.bin", z_avg)
    write_blob(out / "depth.bin", depth)
    meta = {"config": refine.config_dict(config), "steps_per_epoch": result.steps_per_epoch,
            "seconds": time.perf_counter() - t0}
    (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"steps_per_epoch: {result.steps_per_epoch}")
    print(f"epochs: {len(result.log)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = read_bundle(args.bundle)
    shape = (bundle.height, bundle.width, 1)
    depth = read_blob(args.depth, expect_shape=shape)
    pair = [read_blob(p, expect_shape=shape) for p in args.pair]
    t0 = time.perf_counter()
    mae, mse, count = metrics.photometric_error(depth, bundle, pair_with=pair)
    report = metrics.EvalReport(mae, mse, count, config={"bundle": str(args.bundle), "depth": str(args.depth)})
    if bundle.gt_depth is not None:
        report.depth_mae, report.depth_rmse = metrics.depth_metrics(depth, bundle.gt_depth)
        report.depth_count = bundle.height * bundle.width
    report.seconds = time.perf_counter() - t0
    Path(args.report).write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    if not (args.normals or args.pfm):
        raise UsageError("export needs --normals and/or --pfm")
    depth = read_blob(args.depth)
    if args.pfm:
        metrics.write_pfm(args.pfm, depth.plane())
    if args.normals:
        if args.bundle:
            K = read_bundle(args.bundle).reference.intrinsics_rgb
        else:
            K = synth.default_intrinsics(depth.width, depth.height)
        metrics.write_png(args.normals, metrics.depth_to_normals(depth, K).data)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MbDepthError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
