"""Figure rendering for reports: training curves, confusion matrices,
saliency maps and contamination correlation matrices.

All functions write PNG files and never open interactive windows.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FEATURE_LABELS = [f"{10 * b}-{10 * b + 10}Hz" for b in range(20)] + ["LFP"]


def plot_history(history, out_path: str | Path) -> Path:
    """Training MSE and validation MCD per epoch, twin y axes."""
    epochs = [rec.epoch for rec in history]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, [rec.train_mse for rec in history], color="tab:blue",
             label="train MSE")
    if any(rec.train_clip != 0 for rec in history):
        ax1.plot(epochs, [rec.train_clip for rec in history], color="tab:cyan",
                 label="train CLIP")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [rec.val_mcd for rec in history], color="tab:red",
             label="validation MCD")
    ax2.set_ylabel("validation MCD (dB)")
    lines = ax1.get_lines() + ax2.get_lines()
    ax1.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_confusion(cm, out_path: str | Path) -> Path:
    """Row-normalized vowel confusion matrix heat map."""
    counts = np.asarray(cm.counts, dtype=np.float64)
    row_sums = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, row_sums, out=np.zeros_like(counts),
                     where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(norm, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(cm.classes)), cm.classes)
    ax.set_yticks(range(len(cm.classes)), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(cm.classes)):
        for j in range(len(cm.classes)):
            ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                    color="white" if norm[i, j] < 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="row fraction")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_saliency_grid(values: np.ndarray, out_path: str | Path) -> Path:
    """Per-electrode saliency magnitudes laid out on the grid."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(values, cmap="magma")
    ax.set_xlabel("grid column")
    ax.set_ylabel("grid row")
    fig.colorbar(im, ax=ax, label="mean |saliency|")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_saliency_features(values: np.ndarray, out_path: str | Path) -> Path:
    """Per-feature saliency magnitudes (20 spectral bands plus the LFP)."""
    values = np.asarray(values, dtype=np.float64)
    labels = FEATURE_LABELS if values.size == len(FEATURE_LABELS) else [
        str(i) for i in range(values.size)]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(values.size), values)
    ax.set_xticks(range(values.size), labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("mean |saliency|")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_contamination_matrix(matrix: np.ndarray, out_path: str | Path) -> Path:
    """Neural-versus-audio spectrogram correlation matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(matrix, cmap="coolwarm", vmin=-1.0, vmax=1.0)
    ax.set_xlabel("audio frequency row")
    ax.set_ylabel("neural frequency row")
    fig.colorbar(im, ax=ax, label="Pearson r")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
