"""Write the 128x128 natural test image used by the desk-scale experiments and tests."""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests" / "data" / "natural128.png")
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args()
    img = Image.fromarray(np.asarray(data.astronaut()))
    img = img.resize((args.size, args.size), Image.Resampling.BOX)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    img.save(args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
