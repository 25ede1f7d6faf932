"""Figure and raster emission for the report commands."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0

params = {
    "axes.labelsize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 120,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

MID_GRAY = 128


def _figure(**kw):
    with plt.rc_context(params):
        return plt.subplots(**kw)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name.strip()) or "class"


def normalize_plane(plane: np.ndarray) -> np.ndarray:
    """Min-max scale to uint8; a zero-range plane becomes uniform mid-gray."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if not hi > lo:
        return np.full(plane.shape, MID_GRAY, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_heatmaps(planes: np.ndarray, class_names: Sequence[str], stage: str, out_dir) -> List[Path]:
    """One grayscale PNG per class plane; ``planes`` is ``N_t x h x w``."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, plane in zip(class_names, planes):
        p = out / f"{safe_name(name)}_{stage}.png"
        Image.fromarray(normalize_plane(plane), "L").save(p)
        paths.append(p)
    return paths


def cost_panel(planes: np.ndarray, class_names: Sequence[str], stage: str, path):
    n = len(class_names)
    fig, axes = _figure(ncols=n, figsize=(1.6 * n, 1.8), squeeze=False)
    for ax, name, plane in zip(axes[0], class_names, planes):
        ax.imshow(plane, cmap="jet", interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"{stage} cost")
    return _save(fig, path)


def loss_curve(history: Sequence[float], path):
    fig, ax = _figure()
    ax.plot(np.arange(len(history)), history, color="#2b8cbe")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy")
    ax.set_yscale("log")
    return _save(fig, path)


def benchmark_bars(report: dict, path):
    names = list(report["per_dataset"])
    miou = [100 * (report["per_dataset"][n]["miou"] or 0) for n in names]
    macc = [100 * (report["per_dataset"][n]["macc"] or 0) for n in names]
    x = np.arange(len(names))
    fig, ax = _figure()
    ax.bar(x - 0.2, miou, 0.4, label="mIoU", color="#4eb3d3")
    ax.bar(x + 0.2, macc, 0.4, label="mACC", color="#08589e")
    ax.axhline(100 * report["m_miou"], ls="--", lw=0.8, color="#4eb3d3")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("%")
    ax.legend(frameon=False)
    return _save(fig, path)


def speed_bars(report: dict, path):
    names = list(report["per_dataset_ms"])
    fig, ax = _figure()
    ax.bar(names, [report["per_dataset_ms"][n] for n in names], color="#7bccc4")
    ax.axhline(report["mean_ms"], ls="--", lw=0.8, color="k")
    ax.set_ylabel("ms / forward")
    ax.set_title(f"mean {report['mean_ms']:.2f} ms, {report['fps']:.2f} FPS")
    return _save(fig, path)


def ablation_lines(rows: List[Dict], path):
    """Final loss and mIoU per configuration, one marker per row."""
    labels = [r["setting"] for r in rows]
    fig, (ax1, ax2) = _figure(ncols=2, figsize=(2 * fig_width, fig_width * golden_mean))
    ax1.plot(labels, [r["final_loss"] for r in rows], "o-", color="#2b8cbe")
    ax1.set_ylabel("final loss")
    ax2.plot(labels, [100 * r["miou"] for r in rows], "o-", color="#08589e")
    ax2.set_ylabel("mIoU (%)")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
