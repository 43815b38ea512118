"""PNG figures for training logs, length sweeps and ablations (written next to their CSVs)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("acc", "f1", "fdr", "mdr", "miou")


def _read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _col(rows, key) -> np.ndarray:
    return np.array([float(r[key]) for r in rows])


def plot_training_log(csv_path: str | Path, png_path: str | Path | None = None) -> Path:
    """Loss components and per-epoch metrics from a training log."""
    rows = _read_csv(csv_path)
    png_path = Path(png_path or Path(csv_path).with_suffix(".png"))
    epoch = _col(rows, "epoch")
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, label in (("loss_pix", "pixel CE"), ("loss_cls", "class CE"), ("loss_total", "total")):
        ax_l.plot(epoch, _col(rows, key), label=label, lw=1.2)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("loss (nats)")
    ax_l.legend(frameon=False, fontsize=8)
    for key in METRICS:
        vals = _col(rows, key)
        if np.all(np.isnan(vals)):
            continue
        ax_m.plot(epoch, vals, label=key, lw=1.2)
    ax_m.set_xlabel("epoch")
    ax_m.set_ylim(-0.02, 1.02)
    ax_m.legend(frameon=False, fontsize=8, ncol=2)
    for ax in (ax_l, ax_m):
        ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def plot_sweep(rows: list[dict], png_path: str | Path) -> Path:
    """Metrics against clip length (one line per current length) and vice versa."""
    frames = sorted({int(r["frames"]) for r in rows})
    currents = sorted({int(r["current_len"]) for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    for ax, xs, xkey, fixed_key, fixed_val in (
        (axes[0], frames, "frames", "current_len", currents[-1]),
        (axes[1], currents, "current_len", "frames", frames[-1]),
    ):
        sel = sorted((r for r in rows if int(r[fixed_key]) == fixed_val), key=lambda r: int(r[xkey]))
        for key in METRICS:
            ys = np.array([float(r[key]) for r in sel])
            if np.all(np.isnan(ys)):
                continue
            ax.plot([int(r[xkey]) for r in sel], ys, marker="o", ms=3, lw=1.2, label=key)
        ax.set_xlabel(f"{xkey} ({fixed_key}={fixed_val})")
        ax.spines[["top", "right"]].set_visible(False)
    axes[0].set_ylim(-0.02, 1.02)
    axes[0].legend(frameon=False, fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return Path(png_path)


def plot_ablation(means: dict[str, dict[str, float]], png_path: str | Path) -> Path:
    """Grouped bars: one group per metric, one bar per variant."""
    names = list(means)
    x = np.arange(len(METRICS))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 3.4))
    for i, name in enumerate(names):
        vals = [means[name].get(k, np.nan) for k in METRICS]
        ax.bar(x + (i - (len(names) - 1) / 2) * width, np.nan_to_num(vals), width, label=name)
    ax.set_xticks(x, [k.upper() if k != "miou" else "mIoU" for k in METRICS])
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return Path(png_path)
