"""Detection and segmentation metrics: image-level AUROC and pixel-level AUPRO.

AUROC is the tie-aware Mann-Whitney statistic. AUPRO sweeps a descending
threshold jointly over every pixel score in the dataset, tracks the mean
per-region overlap against the false-positive rate, and integrates the curve
up to an FPR cap (0.3 by default), normalized so a perfect detector scores 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(Exception):
    """Raised when the input cannot define the metric (single class, no regions, ...)."""


@dataclass
class EvalReport:
    auroc_image: float
    aupro: float
    fpr_cap: float = 0.3
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    pro_points: list[tuple[float, float]] = field(default_factory=list)
    category: str = "default"
    n_images: int = 0
    n_regions: int = 0


def auroc(scores, labels) -> float:
    """Area under the ROC curve for binary labels (1 = anomalous).

    Computed as the Mann-Whitney U statistic normalized by n_pos * n_neg, with
    midranks so tied scores contribute exactly 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1D arrays of equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes; got {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # midrank of the tie group spanning 1-based positions i+1 .. j+1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    u_stat = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points at every distinct threshold, descending, plus the (0, 0) origin."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both classes")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    distinct = np.flatnonzero(np.diff(sorted_scores) != 0)
    ends = np.append(distinct, len(sorted_scores) - 1)
    points = [(0.0, 0.0)]
    points.extend((fp[e] / n_neg, tp[e] / n_pos) for e in ends)
    return points


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 8-connected regions of a binary mask.

    Returns (labels, count) with labels 0 for background and 1..count for
    regions, numbered by first row-major encounter.
    """
    mask = np.asarray(mask) != 0
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    neighbors = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            count += 1
            stack = [(sy, sx)]
            labels[sy, sx] = count
            while stack:
                y, x = stack.pop()
                for dy, dx in neighbors:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = count
                        stack.append((ny, nx))
    return labels, count


def _integrate_to_cap(points: list[tuple[float, float]], cap: float) -> float:
    """Trapezoid over the (fpr, pro) polyline up to fpr = cap, with an interpolated cut."""
    area = 0.0
    prev_x, prev_y = points[0]
    for x, y in points[1:]:
        if x >= cap:
            if x > prev_x:
                y_cap = prev_y + (y - prev_y) * (cap - prev_x) / (x - prev_x)
            else:
                y_cap = prev_y
            area += (cap - prev_x) * (prev_y + y_cap) / 2.0
            return area
        area += (x - prev_x) * (prev_y + y) / 2.0
        prev_x, prev_y = x, y
    # curve ended before the cap (only possible if cap > 1); extend flat
    area += (cap - prev_x) * prev_y
    return area


def aupro(
    pixel_maps,
    masks,
    fpr_cap: float = 0.3,
    num_thresholds: int = 0,
) -> tuple[float, list[tuple[float, float]]]:
    """Area under the per-region-overlap curve over a set of (map, mask) pairs.

    At each threshold, PRO is the mean over all ground-truth connected regions
    of the fraction of the region predicted positive, and FPR counts false
    positives over all negative pixels. ``num_thresholds`` = 0 sweeps every
    distinct pixel value (exact); > 0 evaluates that many evenly spaced
    thresholds instead.

    Returns the normalized area and the (fpr, pro) curve points.
    """
    if not 0 < fpr_cap <= 1.0:
        raise ValueError(f"fpr_cap must be in (0, 1], got {fpr_cap}")
    if len(pixel_maps) != len(masks) or not pixel_maps:
        raise ValueError("need equal, nonzero numbers of maps and masks")

    region_ids = []
    region_sizes: list[int] = []
    for pix, mask in zip(pixel_maps, masks):
        pix = np.asarray(pix)
        mask = np.asarray(mask) != 0
        if pix.shape != mask.shape:
            raise ValueError(f"map shape {pix.shape} does not match mask shape {mask.shape}")
        labels, count = connected_components(mask)
        ids = labels.astype(np.int64)
        ids[ids > 0] += len(region_sizes)
        for r in range(1, count + 1):
            region_sizes.append(int((labels == r).sum()))
        region_ids.append(ids)

    n_regions = len(region_sizes)
    scores_all = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in pixel_maps])
    ids_all = np.concatenate([ids.ravel() for ids in region_ids])
    n_neg = int((ids_all == 0).sum())
    if n_regions == 0:
        raise UndefinedMetricError("AUPRO needs at least one ground-truth region")
    if n_neg == 0:
        raise UndefinedMetricError("AUPRO needs at least one negative pixel")

    order = np.argsort(-scores_all, kind="stable")
    sorted_scores = scores_all[order]
    sorted_ids = ids_all[order]

    sizes = np.asarray(region_sizes, dtype=np.float64)
    # including one pixel of region r raises the PRO sum by 1/|r|
    contrib = np.where(sorted_ids > 0, 1.0 / sizes[np.maximum(sorted_ids, 1) - 1], 0.0)
    pro_cum = np.cumsum(contrib) / n_regions
    fp_cum = np.cumsum(sorted_ids == 0) / n_neg

    if num_thresholds > 0:
        lo, hi = sorted_scores[-1], sorted_scores[0]
        thresholds = np.linspace(hi, lo, num_thresholds)
        # pixels with score >= t are predicted positive
        counts = np.searchsorted(-sorted_scores, -thresholds, side="right")
    else:
        distinct = np.flatnonzero(np.diff(sorted_scores) != 0)
        counts = np.append(distinct, len(sorted_scores) - 1) + 1

    points = [(0.0, 0.0)]
    for c in counts:
        if c == 0:
            continue
        points.append((float(fp_cum[c - 1]), float(pro_cum[c - 1])))
    value = _integrate_to_cap(points, fpr_cap) / fpr_cap
    return value, points


def write_report(report: EvalReport, path: str) -> None:
    """Serialize an EvalReport as key-value text with inline curve point lists."""
    lines = [
        f"category = {report.category}",
        f"auroc_image = {report.auroc_image:.10g}",
        f"aupro = {report.aupro:.10g}",
        f"fpr_cap = {report.fpr_cap:.10g}",
        f"n_images = {report.n_images}",
        f"n_regions = {report.n_regions}",
        "",
        "[roc_curve]  # fpr tpr",
    ]
    lines.extend(f"{x:.10g}\t{y:.10g}" for x, y in report.roc_points)
    lines.append("")
    lines.append("[pro_curve]  # fpr pro")
    lines.extend(f"{x:.10g}\t{y:.10g}" for x, y in report.pro_points)
    lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def write_curves(report: EvalReport, path: str) -> None:
    """Machine-readable delimited curve file: curve, x, y columns."""
    lines = ["curve\tfpr\tvalue"]
    lines.extend(f"roc\t{x:.10g}\t{y:.10g}" for x, y in report.roc_points)
    lines.extend(f"pro\t{x:.10g}\t{y:.10g}" for x, y in report.pro_points)
    lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
