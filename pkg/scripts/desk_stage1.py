"""Desk-scale Stage 1: fit the natural test image and report PSNR, Cr and the loss curve."""
import argparse
import csv
import time
from pathlib import Path

import numpy as np

from gsenhance.codec_io import load_image, save_gs2d, save_image
from gsenhance.fit import FitConfig, fit_image, is_non_increasing
from gsenhance.metrics import compression_ratio, psnr
from gsenhance.raster import render

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--image", type=Path, default=ROOT / "tests" / "data" / "natural128.png")
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "stage1")
    ap.add_argument("--gaussians", type=int, default=4000)
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--darken", type=float, default=1.0, help="multiply the target by this factor first")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    target = load_image(args.image) * args.darken
    rows = []
    t0 = time.perf_counter()
    gs = fit_image(
        target,
        FitConfig(n_gaussians=args.gaussians, iterations=args.iters, seed=args.seed),
        lambda it, loss, p: rows.append((it, loss, p)),
    )
    elapsed = time.perf_counter() - t0

    img = render(gs)
    save_gs2d(gs, args.out / "model.gs2d")
    save_image(img, args.out / "render.png")
    with open(args.out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "psnr"])
        w.writerows(rows)

    losses = np.array([r[1] for r in rows])
    h, w_ = target.shape[:2]
    print(f"psnr      {psnr(img, target):.2f} dB")
    print(f"cr        {compression_ratio(w_, h, gs.count):.2f}")
    print(f"monotone  {is_non_increasing(losses)}")
    print(f"time      {elapsed:.1f} s")


if __name__ == "__main__":
    main()
