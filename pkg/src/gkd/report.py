"""Figures and files written by the report path.

Everything goes through the Agg backend so it runs headless.  PNGs carry the
config hash in their text metadata.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402


def _meta(config_hash):
    return {"Description": f"config_hash={config_hash}"}


def plot_loss_curves(log, path, config_hash=""):
    """One panel per phase tag, total loss against step."""
    tags = list(dict.fromkeys(r[0] for r in log.rows))
    if not tags:
        return None
    fig, axes = plt.subplots(len(tags), 1, figsize=(6, 2.2 * len(tags)), squeeze=False)
    for ax, tag in zip(axes[:, 0], tags):
        rows = [r for r in log.rows if r[0] == tag]
        ax.plot([r[1] for r in rows], [r[-1] for r in rows], lw=1)
        ax.set_title(tag, fontsize=9)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        if all(r[-1] > 0 for r in rows):
            ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, metadata=_meta(config_hash))
    plt.close(fig)
    return Path(path)


def plot_metric_bars(rows, path, config_hash=""):
    """Grouped bars: one group per metric, one bar per (model, dataset) row."""
    rows = [r for r in rows if r.dataset != "GAP"]
    if not rows:
        return None
    names = [f"{r.model}/{r.dataset}" for r in rows]
    x = np.arange(len(METRIC_NAMES))
    width = 0.8 / len(rows)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, (label, r) in enumerate(zip(names, rows)):
        vals = [getattr(r, m) for m in METRIC_NAMES]
        vals = [0.0 if math.isnan(v) else v for v in vals]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=label)
    ax.set_xticks(x, [m.upper() for m in METRIC_NAMES])
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, metadata=_meta(config_hash))
    plt.close(fig)
    return Path(path)


def save_mask_png(prob, path, config_hash=""):
    """Grayscale PNG of a probability map or mask in [0, 1]."""
    arr = np.asarray(prob, dtype=np.float64).squeeze()
    plt.imsave(path, arr, cmap="gray", vmin=0.0, vmax=1.0, metadata=_meta(config_hash))
    return Path(path)


def dump_masks(predictions, masks, directory, prefix, limit, config_hash=""):
    """Write up to ``limit`` prediction / ground-truth pairs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(min(limit, len(predictions))):
        written.append(save_mask_png(predictions[i], directory / f"{prefix}_{i:03d}_pred.png", config_hash))
        written.append(save_mask_png(masks[i], directory / f"{prefix}_{i:03d}_true.png", config_hash))
    return written
