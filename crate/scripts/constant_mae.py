#!/usr/bin/env python3
"""MAE of the best constant predictor on a dataset split.

Per-image MAE of a constant c against a binary mask with foreground
fraction f is c(1-f) + (1-c)f. Averaged over images this is linear in c,
so the best constant is 0 or 1 and the value is min(mean f, 1 - mean f).
The minimum is also confirmed numerically over a grid of constants.

    python3 scripts/constant_mae.py DATA/test
"""
import pathlib
import sys

import numpy as np
from PIL import Image


def fractions(split_dir):
    masks = sorted((pathlib.Path(split_dir) / "masks").glob("*.png"))
    if not masks:
        sys.exit(f"no masks under {split_dir}/masks")
    out = []
    for p in masks:
        m = np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0
        out.append(np.mean(m > 0.5))
    return np.array(out)


def main():
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    f = fractions(sys.argv[1])
    closed = min(f.mean(), 1 - f.mean())
    grid = np.linspace(0, 1, 1001)
    brute = min(np.mean(c * (1 - f) + (1 - c) * f) for c in grid)
    assert abs(brute - closed) < 1e-12, (brute, closed)
    print(f"{closed:.12f}")


if __name__ == "__main__":
    main()
