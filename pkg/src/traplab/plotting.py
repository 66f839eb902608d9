"""Figures for run reports. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import patches  # noqa: E402

REPORT_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
}

# Tableau-ish palette; one entry per class index, cycling.
PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Drop the software/version stamp so identical figures give identical bytes.
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(records: Sequence, path: str | Path) -> Path:
    """Clean, poisoned and total loss per epoch, with curriculum stage changes marked."""
    with plt.rc_context(REPORT_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        epochs = [r.epoch for r in records]
        ax.plot(epochs, [r.loss_clean for r in records], label="clean", color=PALETTE[0])
        ax.plot(epochs, [r.loss_poisoned for r in records], label="poisoned", color=PALETTE[2])
        ax.plot(epochs, [r.loss_total for r in records], label="total", color="0.4", linestyle="--")
        for prev, cur in zip(records, records[1:]):
            if cur.rho != prev.rho:
                ax.axvline(cur.epoch - 0.5, color="0.7", linewidth=0.8)
                ax.text(cur.epoch - 0.4, ax.get_ylim()[1], f"rho={cur.rho:g}", va="top", fontsize=7, color="0.4")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_trigger(pixels: np.ndarray, path: str | Path) -> Path:
    """The learned trigger at true colors, nearest-neighbour upscaled."""
    pixels = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    with plt.rc_context(REPORT_STYLE):
        fig, ax = plt.subplots(figsize=(2.2, 2.2))
        ax.imshow(pixels, interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title("trigger")
        fig.tight_layout()
        return _save(fig, path)


def plot_detections(
    image: np.ndarray,
    detections: Sequence,
    class_names: Sequence[str],
    path: str | Path,
    ground_truth: Sequence = (),
    conf: float = 0.5,
    title: str | None = None,
) -> Path:
    """Overlay confident detections (solid) and ground truth (dashed) on one image."""
    with plt.rc_context(REPORT_STYLE):
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(np.clip(image, 0, 1), interpolation="nearest")
        for g in ground_truth:
            b = g.box
            ax.add_patch(patches.Rectangle((b.a1, b.b1), b.width, b.height, fill=False, linestyle="--", linewidth=0.8, edgecolor="white"))
        for d in detections:
            if d.confidence <= conf:
                continue
            b, color = d.box, PALETTE[d.label % len(PALETTE)]
            ax.add_patch(patches.Rectangle((b.a1, b.b1), b.width, b.height, fill=False, linewidth=1.2, edgecolor=color))
            ax.text(b.a1, b.b1, f"{class_names[d.label]} {d.confidence:.2f}", fontsize=6, color="white",
                    va="bottom", bbox={"facecolor": color, "pad": 0.5, "linewidth": 0})
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_bars(values: Mapping[str, Mapping[str, float | None]], path: str | Path, title: str = "") -> Path:
    """Grouped bars: one group per row label, one bar per metric (missing values skipped)."""
    labels = list(values)
    metrics = list(dict.fromkeys(m for row in values.values() for m in row))
    with plt.rc_context(REPORT_STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(2.4 * len(metrics), 2.8), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            ys = [values[l].get(metric) for l in labels]
            xs = np.arange(len(labels))
            ax.bar(xs, [0 if y is None else y for y in ys], color=[PALETTE[i % len(PALETTE)] for i in xs])
            for x, y in zip(xs, ys):
                ax.text(x, 0 if y is None else y, "n/a" if y is None else f"{y:.2f}", ha="center", va="bottom", fontsize=7)
            ax.set_xticks(xs)
            ax.set_xticklabels(labels, rotation=30, ha="right")
            ax.set_title(metric)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(xs: Sequence, series: Mapping[str, Sequence[float | None]], path: str | Path, xlabel: str) -> Path:
    """Line per metric over a swept parameter; categorical x values are spaced evenly."""
    numeric = all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in xs)
    pos = list(xs) if numeric else list(range(len(xs)))
    with plt.rc_context(REPORT_STYLE):
        fig, axes = plt.subplots(1, len(series), figsize=(2.6 * len(series), 2.6), squeeze=False)
        for i, (ax, (name, ys)) in enumerate(zip(axes[0], series.items())):
            pts = [(p, y) for p, y in zip(pos, ys) if y is not None]
            if pts:
                ax.plot(*zip(*pts), marker="o", color=PALETTE[i % len(PALETTE)])
            ax.set_xlabel(xlabel)
            ax.set_title(name)
            if not numeric:
                ax.set_xticks(pos)
                ax.set_xticklabels([str(x) for x in xs], rotation=30, ha="right")
        fig.tight_layout()
        return _save(fig, path)
