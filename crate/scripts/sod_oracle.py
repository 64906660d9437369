#!/usr/bin/env python3
"""Reference S-measure and E-measure values for random 16x16 cases.

Transcribed from the py_sod_metrics formulation with the conventions used
by focus-core: predictions are taken as given (no min-max rescaling), the
enhanced-alignment sum is divided by N, and an all-zero adaptive threshold
predicts nothing.

Predictions are stored as integer thousandths so both sides see identical
floats.

    python3 scripts/sod_oracle.py > crates/core/tests/fixtures/sod_oracle.json
"""
import json
import sys

import numpy as np

EPS = np.spacing(1)


def s_object(pred, gt):
    x = np.mean(pred[gt])
    sigma_x = np.std(pred[gt], ddof=1)
    return 2 * x / (x**2 + 1 + sigma_x + EPS)


def object_score(pred, gt):
    fg = pred * gt
    bg = (1 - pred) * (1 - gt)
    u = np.mean(gt)
    return u * s_object(fg, gt) + (1 - u) * s_object(bg, ~gt)


def centroid(gt):
    h, w = gt.shape
    if np.count_nonzero(gt) == 0:
        return int(np.round(w / 2)), int(np.round(h / 2))
    y, x = np.argwhere(gt).mean(axis=0).round()
    return int(x) + 1, int(y) + 1


def ssim(pred, gt):
    h, w = pred.shape
    n = h * w
    x = np.mean(pred)
    y = np.mean(gt)
    sigma_x = np.sum((pred - x) ** 2) / (n - 1)
    sigma_y = np.sum((gt - y) ** 2) / (n - 1)
    sigma_xy = np.sum((pred - x) * (gt - y)) / (n - 1)
    alpha = 4 * x * y * sigma_xy
    beta = (x**2 + y**2) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def region_score(pred, gt):
    x, y = centroid(gt)
    h, w = gt.shape
    area = h * w
    gf = gt.astype(np.float64)
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1 - w1 - w2 - w3
    parts = [
        (pred[0:y, 0:x], gf[0:y, 0:x], w1),
        (pred[0:y, x:w], gf[0:y, x:w], w2),
        (pred[y:h, 0:x], gf[y:h, 0:x], w3),
        (pred[y:h, x:w], gf[y:h, x:w], w4),
    ]
    return sum(wt * ssim(p, g) for p, g, wt in parts)


def s_measure(pred, gt):
    y = np.mean(gt)
    if y == 0:
        return 1 - np.mean(pred)
    if y == 1:
        return np.mean(pred)
    return max(0.0, 0.5 * object_score(pred, gt) + 0.5 * region_score(pred, gt))


def em_binary(binary, gt):
    n = gt.size
    gt_fg = np.count_nonzero(gt)
    fg_fg = np.count_nonzero(binary & gt)
    fg_bg = np.count_nonzero(binary & ~gt)
    pred_fg = fg_fg + fg_bg
    pred_bg = n - pred_fg
    if gt_fg == 0:
        total = pred_bg
    elif gt_fg == n:
        total = pred_fg
    else:
        bg_fg = gt_fg - fg_fg
        bg_bg = pred_bg - bg_fg
        mp = pred_fg / n
        mg = gt_fg / n
        parts = [
            (fg_fg, 1 - mp, 1 - mg),
            (fg_bg, 1 - mp, 0 - mg),
            (bg_fg, 0 - mp, 1 - mg),
            (bg_bg, 0 - mp, 0 - mg),
        ]
        total = 0.0
        for count, a, b in parts:
            align = 2 * (a * b) / (a**2 + b**2 + EPS)
            total += (align + 1) ** 2 / 4 * count
    return total / n


def e_adaptive(pred, gt):
    t = min(2 * pred.mean(), 1)
    if t == 0:
        return em_binary(pred > 0, gt)
    return em_binary(pred >= t, gt)


def e_curve(pred, gt):
    return [em_binary(pred >= k / 255, gt) for k in range(256)]


def random_case(rng, kind):
    h = w = 16
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(3, 12, size=2)
    ry, rx = rng.uniform(2, 6, size=2)
    gt = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    if kind == 0:
        q = rng.integers(0, 1001, size=(h, w))
    elif kind == 1:
        noise = rng.normal(0, 0.25, size=(h, w))
        q = np.clip(np.round((gt * 0.8 + 0.1 + noise) * 1000), 0, 1000).astype(int)
    else:
        q = np.where(gt, rng.integers(600, 1001, size=(h, w)), rng.integers(0, 401, size=(h, w)))
    return q, gt


def main():
    rng = np.random.default_rng(20240607)
    cases = []
    for i in range(20):
        q, gt = random_case(rng, i % 3)
        pred = q / 1000
        curve = e_curve(pred, gt)
        cases.append(
            {
                "h": 16,
                "w": 16,
                "pred_milli": q.flatten().tolist(),
                "gt": gt.astype(int).flatten().tolist(),
                "s_measure": float(s_measure(pred, gt)),
                "e_adaptive": float(e_adaptive(pred, gt)),
                "e_mean": float(np.mean(curve)),
                "e_max": float(np.max(curve)),
            }
        )
    json.dump({"cases": cases}, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
