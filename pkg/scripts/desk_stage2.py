"""Desk-scale Stage 2: enhance a fitted low-light model and report brightness, hue drift and contrast.

Run ``desk_stage1.py --darken 0.2`` first, or pass any .gs2d model.
"""
import argparse
import time
from pathlib import Path

import numpy as np

from gsenhance.codec_io import load_gs2d, save_enhancer, save_gs2d, save_image
from gsenhance.enhance import EnhanceConfig, enhance, operator_renders, weight_map_images
from gsenhance.losses import LossBreakdown, hue_loss
from gsenhance.metrics import LUMA, evaluate
from gsenhance.raster import render

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", type=Path, default=ROOT / "runs" / "stage1" / "model.gs2d")
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "stage2")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--lambda6", type=float, default=500.0)
    ap.add_argument("--dumps", action="store_true", help="also write weight maps and per-operator renders")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    gs = load_gs2d(args.model)
    cfg = EnhanceConfig(iterations=args.iters, k=args.k, lambda6=args.lambda6)
    log = open(args.out / "loss.csv", "w")
    log.write(LossBreakdown.CSV_HEADER + "\n")
    t0 = time.perf_counter()
    try:
        out, params = enhance(gs, cfg, lambda it, parts: log.write(parts.csv_row(it) + "\n"))
    finally:
        log.close()
    elapsed = time.perf_counter() - t0

    low, enh = render(gs), render(out)
    save_gs2d(out, args.out / "enhanced.gs2d")
    save_enhancer(params, args.out / "enhancer.bin")
    save_image(low, args.out / "low.png")
    save_image(enh, args.out / "enhanced.png")
    if args.dumps:
        for k, img in enumerate(weight_map_images(params, low)):
            save_image(img, args.out / f"weight_{k:02d}.png")
        for k, img in enumerate(operator_renders(gs, params)):
            save_image(img, args.out / f"operator_{k:02d}.png")

    # with frozen opacity the brightest reachable render has every color at 1
    ceiling = render(gs.with_colors(np.ones_like(gs.color))).mean()
    y_low, y_enh = low @ LUMA, enh @ LUMA
    print(f"luminance {y_low.mean():.3f} -> {y_enh.mean():.3f} (ceiling {ceiling:.3f})")
    print(f"hue       {hue_loss(enh, low, cfg.tau)[0]:.4f}")
    print(f"sigma     {y_low.std():.3f} -> {y_enh.std():.3f}")
    print(evaluate(enh).to_text())
    print(f"time      {elapsed:.1f} s")


if __name__ == "__main__":
    main()
