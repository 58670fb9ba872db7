"""Figures written next to the CSV outputs. Rendering is headless and PNGs carry no timestamps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_memory(reports, path) -> Path:
    """Peak feature memory against block depth, one line per strategy."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for strategy in dict.fromkeys(r.strategy for r in reports):
        pts = sorted((r.depth, r.feature_peak_bytes) for r in reports if r.strategy == strategy)
        ax.plot([d for d, _ in pts], [b / 2 ** 20 for _, b in pts], marker="o", ms=3, label=strategy)
    mode = reports[0].mode if reports else "training"
    ax.set_xlabel("layers in block (M)")
    ax.set_ylabel(f"{mode} peak feature memory (MiB)")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_metrics(metrics, path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    ep = [m.epoch for m in metrics]
    a.plot(ep, [m.train_loss for m in metrics])
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    a.set_yscale("log")
    b.plot(ep, [m.train_err for m in metrics], label="train")
    b.plot(ep, [m.eval_err for m in metrics], label="eval")
    b.set_xlabel("epoch")
    b.set_ylabel("error")
    b.legend(frameon=False)
    for ax in (a, b):
        ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_heatmap(report, path) -> Path:
    n = len(report.blocks)
    fig, axes = plt.subplots(1, n, figsize=(3.6 * n, 3.4), squeeze=False)
    for ax, b in zip(axes[0], report.blocks):
        m = np.ma.masked_invalid(b.matrix.T)  # sources down, targets across
        vmax = np.nanmax(b.matrix) if np.isfinite(b.matrix).any() else 1.0
        im = ax.imshow(m, cmap="viridis", origin="upper", vmin=0, vmax=vmax or 1.0)
        ax.set_title(f"block {b.block}")
        ax.set_xlabel("target layer" + (f" (last: {b.consumer})" if b.consumer else ""))
        ax.set_ylabel("source layer")
        ax.set_xticks(range(b.matrix.shape[0]), [str(t) for t in range(1, b.matrix.shape[0] + 1)], fontsize=6)
        ax.set_yticks(range(b.matrix.shape[1]), [str(s) for s in range(b.matrix.shape[1])], fontsize=6)
        fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_sweep(rows, path) -> Path:
    """Error against MACs when trained, parameters against the varied value otherwise."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    trained = [r for r in rows if r.error is not None]
    groups = dict.fromkeys(r.blocks for r in rows)
    for blocks in groups:
        sel = [r for r in (trained or rows) if r.blocks == blocks]
        label = "-".join(map(str, blocks))
        if trained:
            ax.plot([r.macs for r in sel], [r.error for r in sel], marker="o", ms=3, label=label)
        else:
            ax.plot([str(r.value) for r in sel], [r.params for r in sel], marker="o", ms=3, label=label)
    if trained:
        ax.set_xlabel("MACs")
        ax.set_ylabel("eval error")
    else:
        ax.set_xlabel(rows[0].vary if rows else "value")
        ax.set_ylabel("parameters")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=7, title="blocks")
    return _save(fig, path)
