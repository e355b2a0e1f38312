"""Independent brute-force oracles the implementation is checked against.

Everything here follows the definitions literally (triple loops, exhaustive
enumeration, recursion) and shares no code with the package.
"""

import math

import numpy as np


def brute_force_window_scores(test, bank, delta, mode="local_window"):
    """Per-location min L2 distance by looping over samples and window offsets."""
    _, grid_h, grid_w = test.shape
    n_train = bank.shape[0]
    out = np.zeros((grid_h, grid_w), dtype=np.float64)
    radius = delta // 2
    for h in range(grid_h):
        for w in range(grid_w):
            best = math.inf
            if mode == "global":
                cells = [(a, b) for a in range(grid_h) for b in range(grid_w)]
            elif mode == "per_location":
                cells = [(h, w)]
            else:
                cells = [
                    (h + dh, w + dw)
                    for dh in range(-radius, radius + 1)
                    for dw in range(-radius, radius + 1)
                    if 0 <= h + dh < grid_h and 0 <= w + dw < grid_w
                ]
            for m in range(n_train):
                for a, b in cells:
                    diff = test[:, h, w].astype(np.float64) - bank[m, :, a, b].astype(np.float64)
                    dist = math.sqrt(float((diff * diff).sum()))
                    if dist < best:
                        best = dist
            out[h, w] = best
    return out


def pairwise_auroc(scores, labels):
    """Count positive-over-negative pairs, ties worth one half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def recursive_flood_fill(mask):
    """8-connected region memberships via plain recursion, row-major discovery order."""
    mask = np.asarray(mask) != 0
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)

    def fill(y, x, region):
        labels[y, x] = region
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and labels[ny, nx] == 0:
                    fill(ny, nx, region)

    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and labels[y, x] == 0:
                count += 1
                fill(y, x, count)
    return labels, count


def exhaustive_aupro(pixel_maps, masks, fpr_cap=0.3):
    """Evaluate PRO and FPR by recounting at every distinct score value.

    Regions come from the recursive flood fill; per-threshold counts are
    recomputed from scratch each time.
    """
    regions = []  # (image index, boolean region mask)
    for i, mask in enumerate(masks):
        labels, count = recursive_flood_fill(mask)
        for r in range(1, count + 1):
            regions.append((i, labels == r))
    neg_total = sum(int((np.asarray(m) == 0).sum()) for m in masks)
    values = sorted({float(v) for p in pixel_maps for v in np.asarray(p).ravel()}, reverse=True)

    points = [(0.0, 0.0)]
    for threshold in values:
        overlaps = []
        false_pos = 0
        for i, (pix, mask) in enumerate(zip(pixel_maps, masks)):
            predicted = np.asarray(pix) >= threshold
            false_pos += int((predicted & (np.asarray(mask) == 0)).sum())
        for i, region in regions:
            predicted = np.asarray(pixel_maps[i]) >= threshold
            overlaps.append((predicted & region).sum() / region.sum())
        points.append((false_pos / neg_total, sum(overlaps) / len(overlaps)))

    # trapezoid up to the cap with an interpolated cut, normalized by the cap
    area = 0.0
    prev_x, prev_y = points[0]
    for x, y in points[1:]:
        if x >= fpr_cap:
            y_cap = prev_y if x == prev_x else prev_y + (y - prev_y) * (fpr_cap - prev_x) / (x - prev_x)
            area += (fpr_cap - prev_x) * (prev_y + y_cap) / 2.0
            break
        area += (x - prev_x) * (prev_y + y) / 2.0
        prev_x, prev_y = x, y
    return area / fpr_cap


def bilinear_reference(src, out_h, out_w):
    """Direct per-pixel evaluation of half-pixel-center bilinear interpolation."""
    src = np.asarray(src, dtype=np.float64)
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            sy = min(max((oy + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
            sx = min(max((ox + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            fy, fx = sy - y0, sx - x0
            out[oy, ox] = (
                src[y0, x0] * (1 - fy) * (1 - fx)
                + src[y0, x1] * (1 - fy) * fx
                + src[y1, x0] * fy * (1 - fx)
                + src[y1, x1] * fy * fx
            )
    return out
