"""Figures rendered next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sample import SamplerTrace, SweepRow  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trace(trace: SamplerTrace, path, code_gt: Optional[np.ndarray] = None, item: int = 0) -> Path:
    """Residual (and kernel-code L1 when the truth is known) against the timestep."""
    ncols = 2 if code_gt is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(4.5 * ncols, 3.4), squeeze=False)
    t = np.asarray(trace.t)
    res = np.array([r[item] for r in trace.residual])
    ax = axes[0, 0]
    ax.semilogy(t, np.maximum(res, 1e-16), marker=".")
    ax.set_xlabel("t")
    ax.set_ylabel("LR residual (MSE)")
    ax.invert_xaxis()
    if code_gt is not None:
        ax = axes[0, 1]
        ax.plot(t, trace.kernel_l1(code_gt)[:, item], marker=".", color="tab:orange")
        ax.set_xlabel("t")
        ax.set_ylabel("kernel-code L1")
        ax.invert_xaxis()
    return _save(fig, path)


def plot_sweep(rows: Sequence[SweepRow], path) -> Path:
    lams = [r.lam for r in rows]
    pos = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    axes[0].plot(pos, [r.psnr for r in rows], marker="o")
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].semilogy(pos, [max(r.residual, 1e-16) for r in rows], marker="o", color="tab:red")
    axes[1].set_ylabel("final LR residual")
    for ax in axes:
        ax.set_xticks(pos)
        ax.set_xticklabels([f"{v:g}" for v in lams])
        ax.set_xlabel("lambda")
    return _save(fig, path)


def plot_training(metrics: dict, path) -> Path:
    it = metrics["iter"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for ax, key in zip(axes[:2], ("eps_mse", "kernel_l1")):
        ax.semilogy(it, metrics[key], lw=0.5, alpha=0.4)
        w = min(50, len(it))
        if w > 1:
            smooth = np.convolve(metrics[key], np.ones(w) / w, mode="valid")
            ax.semilogy(it[w - 1:], smooth, lw=1.5)
        ax.set_xlabel("iteration")
        ax.set_ylabel(key)
    axes[2].plot(it, metrics["lr"])
    axes[2].set_xlabel("iteration")
    axes[2].set_ylabel("learning rate")
    return _save(fig, path)


def plot_report(rows, path) -> Path:
    """Per-image PSNR and LR-consistency PSNR bars for an eval report."""
    ids = [r.id for r in rows]
    pos = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(ids) + 2), 3.4))
    ax.bar(pos - 0.2, [r.psnr for r in rows], width=0.4, label="SR PSNR")
    ax.bar(pos + 0.2, [r.lr_psnr for r in rows], width=0.4, label="LR-consistency PSNR")
    ax.set_xticks(pos)
    ax.set_xticklabels(ids, rotation=45, ha="right")
    ax.set_ylabel("dB")
    ax.legend()
    return _save(fig, path)
