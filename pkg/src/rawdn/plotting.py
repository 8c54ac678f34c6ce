"""Matplotlib figures for training logs, evaluation reports and frame previews."""

from __future__ import annotations

import math
from os import PathLike
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_training(records: list[dict], out_dir: str | PathLike) -> list[Path]:
    """Loss curves (total, reconstruction, orthonormality) and validation PSNR/SSIM."""
    out_dir = Path(out_dir)
    it = [r["iter"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(it, [r["loss"] for r in records], label="total", lw=1)
    ax.plot(it, [r["l_r"] for r in records], label="reconstruction (L1)", lw=1)
    ax.plot(it, [max(r["l_c"], 1e-12) for r in records], label="color orthonormality", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    paths = [_finish(fig, out_dir / "training_loss.png")]

    val = [r for r in records if "psnr" in r]
    if val:
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        a1.plot([r["iter"] for r in val], [r["psnr"] for r in val], "o-", ms=3)
        a1.set_xlabel("iteration")
        a1.set_ylabel("PSNR (dB)")
        a2.plot([r["iter"] for r in val], [r["ssim"] for r in val], "o-", ms=3, color="C1")
        a2.set_xlabel("iteration")
        a2.set_ylabel("SSIM")
        paths.append(_finish(fig, out_dir / "validation_quality.png"))
    return paths


def plot_report(doc: dict, path: str | PathLike) -> Path:
    """Grouped bars of noisy vs model PSNR and SSIM per noise level."""
    levels = [k for k in doc if k != "mean"] + ["mean"]
    x = np.arange(len(levels))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric in zip(axes, ("psnr", "ssim")):
        for offset, kind in ((-0.2, "noisy"), (0.2, "model")):
            vals = [doc[lv][kind][metric] for lv in levels]
            vals = [v if math.isfinite(v) else np.nan for v in vals]
            ax.bar(x + offset, vals, width=0.4, label=kind)
        ax.set_xticks(x, levels, rotation=30, ha="right")
        ax.set_ylabel(metric.upper())
    axes[0].legend(frameon=False)
    return _finish(fig, path)


def preview_rgb(packed: np.ndarray) -> np.ndarray:
    """Half-resolution RGB preview of a packed (4, h, w) frame, no demosaicking."""
    r, g1, g2, b = np.asarray(packed, dtype=np.float64)
    rgb = np.stack([r, 0.5 * (g1 + g2), b], axis=-1)
    return np.clip(rgb, 0, 1) ** (1 / 2.2)


def plot_frames(frames: dict, path: str | PathLike) -> Path:
    """Side-by-side previews, e.g. ``{"noisy": z, "denoised": y, "clean": c}``."""
    fig, axes = plt.subplots(1, len(frames), figsize=(3 * len(frames), 3.2))
    for ax, (title, frame) in zip(np.atleast_1d(axes), frames.items()):
        ax.imshow(preview_rgb(frame), interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    return _finish(fig, path)
