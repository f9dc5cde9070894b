"""Command-line front end: ``fit``, ``enhance``, ``render``, ``metrics`` and ``info``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import codec_io
from .enhance import EnhanceConfig, enhance, init_enhancer, operator_renders, weight_map_images
from .fit import FitConfig, fit_image
from .losses import LossBreakdown
from .metrics import compression_ratio, evaluate, psnr
from .raster import render, set_threads

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "GS2D_THREADS"

log = logging.getLogger("gsenhance")


class UsageError(Exception):
    pass


def _existing(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _writable(path: Path | None, what: str) -> Path | None:
    if path is not None and not path.resolve().parent.is_dir():
        raise UsageError(f"directory for {what} does not exist: {path.parent}")
    return path


def _positive(name: str, value) -> None:
    if not value > 0:
        raise UsageError(f"{name} must be positive, got {value}")


def _resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        _positive("--threads", flag)
        return flag
    env = os.environ.get(THREADS_ENV)
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    _positive(THREADS_ENV, n)
    return n


def cmd_fit(args) -> int:
    _existing(args.input, "input image")
    _writable(args.out, "--out")
    _writable(args.log, "--log")
    cfg = FitConfig(
        n_gaussians=args.gaussians, iterations=args.iters, lr0=args.lr,
        lambda_ssim=args.lambda_ssim, tile_px=args.tile, seed=args.seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    target = codec_io.load_image(args.input)
    h, w, _ = target.shape

    log_file = open(args.log, "w") if args.log else None
    try:
        if log_file:
            log_file.write("iter,loss,psnr\n")

        def sink(it: int, loss: float, p: float) -> None:
            if log_file:
                log_file.write(f"{it},{loss:.9g},{p:.6f}\n")
            if args.verbose and it % 100 == 0:
                log.info("iter %d loss %.6f psnr %.3f", it, loss, p)

        gs = fit_image(target, cfg, sink)
    finally:
        if log_file:
            log_file.close()
    codec_io.save_gs2d(gs, args.out)
    final = psnr(render(gs, cfg.tile_px), target)
    print(f"psnr {final:.4f}")
    print(f"cr {compression_ratio(w, h, gs.count):.2f}")
    return EXIT_OK


def _enhance_config(args) -> EnhanceConfig:
    cfg = EnhanceConfig(
        iterations=args.iters, lr0=args.lr, k=args.k, hid=args.hid, tile_px=args.tile, seed=args.seed,
        e_h=args.eh, tau=args.tau, gamma=args.gamma,
    )
    for i in range(1, 8):
        value = getattr(args, f"lambda{i}")
        if value is not None:
            setattr(cfg, f"lambda{i}", value)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _dump_dir(path: Path | None) -> Path | None:
    if path is not None:
        if path.exists() and not path.is_dir():
            raise UsageError(f"not a directory: {path}")
        path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_enhance(args) -> int:
    _existing(args.model, "model")
    if args.encoder_weights:
        _existing(args.encoder_weights, "encoder weights")
    for p, what in ((args.out, "--out"), (args.log, "--log"), (args.save_params, "--save-params")):
        _writable(p, what)
    cfg = _enhance_config(args)
    weights_dir = _dump_dir(args.dump_weights)
    ops_dir = _dump_dir(args.dump_operators)

    gs = codec_io.load_gs2d(args.model)
    params = init_enhancer(cfg.k, cfg.hid, cfg.seed)
    if args.encoder_weights:
        params = codec_io.load_encoder_weights(args.encoder_weights, params)

    log_file = open(args.log, "w") if args.log else None
    try:
        if log_file:
            log_file.write(LossBreakdown.CSV_HEADER + "\n")

        def sink(it: int, parts: LossBreakdown) -> None:
            if log_file:
                log_file.write(parts.csv_row(it) + "\n")
            if args.verbose and it % 100 == 0:
                log.info("iter %d total %.6f", it, parts.total)

        enhanced, params = enhance(gs, cfg, sink, params=params)
    finally:
        if log_file:
            log_file.close()
    codec_io.save_gs2d(enhanced, args.out)
    if args.save_params:
        codec_io.save_enhancer(params, args.save_params)
    if weights_dir or ops_dir:
        guide = render(gs, cfg.tile_px)
        if weights_dir:
            for k, img in enumerate(weight_map_images(params, guide)):
                codec_io.save_image(img, weights_dir / f"weight_{k:02d}.png")
        if ops_dir:
            for k, img in enumerate(operator_renders(gs, params, cfg.tile_px)):
                codec_io.save_image(img, ops_dir / f"operator_{k:02d}.png")
    return EXIT_OK


def cmd_render(args) -> int:
    _existing(args.model, "model")
    _writable(args.out, "--out")
    gs = codec_io.load_gs2d(args.model)
    codec_io.save_image(render(gs), args.out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    _existing(args.test, "test image")
    if args.ref:
        _existing(args.ref, "reference image")
    test = codec_io.load_image(args.test)
    ref = codec_io.load_image(args.ref) if args.ref else None
    if ref is not None and ref.shape != test.shape:
        raise UsageError(f"image sizes differ: test {test.shape[:2]}, ref {ref.shape[:2]}")
    report = evaluate(test, ref)
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def cmd_info(args) -> int:
    _existing(args.model, "model")
    gs = codec_io.load_gs2d(args.model)
    print(f"count {gs.count}")
    print(f"width {gs.width}")
    print(f"height {gs.height}")
    cr = f"{compression_ratio(gs.width, gs.height, gs.count):.2f}" if gs.count else "inf"
    print(f"cr {cr}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsenhance", description="2D Gaussian image fitting and low-light enhancement")
    ap.add_argument("--threads", type=int, default=None, help=f"cap rasterizer threads (fallback: ${THREADS_ENV})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit Gaussians to an image")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gaussians", type=int, default=70000)
    p.add_argument("--iters", type=int, default=30000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--tile", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", type=Path)
    p.set_defaults(func=cmd_fit)

    d = EnhanceConfig()
    p = sub.add_parser("enhance", help="enhance the colors of a fitted model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=int, default=d.iterations)
    p.add_argument("--lr", type=float, default=d.lr0)
    p.add_argument("--k", type=int, default=d.k)
    p.add_argument("--hid", type=int, default=d.hid)
    p.add_argument("--tile", type=int, default=d.tile_px)
    for i in range(1, 8):
        p.add_argument(f"--lambda{i}", type=float, default=None, help=f"default {getattr(d, f'lambda{i}')}")
    p.add_argument("--eh", type=float, default=d.e_h)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--encoder-weights", type=Path, help="enhancer container holding encoder.* tensors")
    p.add_argument("--save-params", type=Path, help="write the trained enhancer container here")
    p.add_argument("--dump-weights", type=Path, help="directory for per-channel weight-map PNGs")
    p.add_argument("--dump-operators", type=Path, help="directory for per-operator renders")
    p.add_argument("--log", type=Path)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("render", help="render a model to PNG")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="image quality metrics")
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--ref", type=Path)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("info", help="print model size and compression ratio")
    p.add_argument("--model", type=Path, required=True)
    p.set_defaults(func=cmd_info)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        set_threads(_resolve_threads(args.threads))
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (codec_io.CodecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
