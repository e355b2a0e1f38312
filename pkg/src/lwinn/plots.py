"""Matplotlib figure rendering for eval reports and ablation sweeps.

Figures are written next to the delimited outputs they visualize. PNG date
metadata is scrubbed so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_SAVE_KW = {"dpi": 120, "metadata": {"Date": None}}


def save_curve_figure(points, path: str, title: str, ylabel: str, cap: float | None = None) -> None:
    """Plot one (fpr, value) polyline."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, ys, lw=1.5)
    if cap is not None:
        ax.axvline(cap, color="gray", ls="--", lw=0.8, label=f"fpr cap {cap:g}")
        ax.legend(loc="lower right")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_ablation_figures(rows: list[dict], out_prefix: str) -> list[str]:
    """Window-size sweep figures: metrics vs delta and per-image test time vs delta.

    Rows sharing the same non-delta toggles are drawn as one series. Returns
    the written paths.
    """
    by_series: dict[str, list[dict]] = {}
    for row in rows:
        key = f"pool={row['pooling']},interp={row['interpolation']}"
        by_series.setdefault(key, []).append(row)
    written = []

    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name, series in sorted(by_series.items()):
        series = sorted(series, key=lambda r: r["delta"])
        deltas = [r["delta"] for r in series]
        suffix = f" [{name}]" if len(by_series) > 1 else ""
        ax.plot(deltas, [r["auroc_image"] for r in series], marker="o", label="detection" + suffix)
        if any(r["aupro"] is not None for r in series):
            ax.plot(
                deltas,
                [r["aupro"] if r["aupro"] is not None else float("nan") for r in series],
                marker="s",
                label="segmentation" + suffix,
            )
    ax.set_xlabel("window size")
    ax.set_ylabel("score")
    ax.set_title("accuracy vs window size")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out_prefix + "_scores.png"
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name, series in sorted(by_series.items()):
        series = sorted(series, key=lambda r: r["delta"])
        deltas = [r["delta"] for r in series]
        label = name if len(by_series) > 1 else "test time"
        ax.plot(deltas, [r["test_seconds_per_image"] for r in series], marker="o", label=label)
    ax.set_xlabel("window size")
    ax.set_ylabel("seconds per image")
    ax.set_title("test time vs window size")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out_prefix + "_time.png"
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    written.append(path)
    return written
