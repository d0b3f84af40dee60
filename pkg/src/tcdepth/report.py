"""Figures written next to the CSV outputs of training and evaluation runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .temporal_eval import DepthTrajectory, per_pixel_inconsistency  # noqa: E402
from .train import LOSS_ORDER, TrainLog  # noqa: E402

_COLORS = {"sup": "tab:blue", "temp": "tab:orange", "aug": "tab:green"}


def _running_mean(values: np.ndarray, window: int) -> np.ndarray:
    if values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_training(log: TrainLog, path: Path | str, window: int = 20) -> Path:
    """Per-loss step values (running mean) and per-epoch validation SSIMAE."""
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 3.8))
    for name in LOSS_ORDER:
        recs = [r for r in log.steps if r.loss == name and r.applied]
        if not recs:
            continue
        steps = np.array([r.step for r in recs])
        vals = _running_mean(np.array([r.value for r in recs]), window)
        ax_loss.plot(steps[len(steps) - len(vals):], vals, label=name, color=_COLORS[name], lw=1.2)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel(f"SSIMAE (running mean, {window} steps)")
    ax_loss.legend(frameon=False)

    epochs = np.arange(1, len(log.val_ssimae) + 1)
    ax_val.plot(epochs, log.val_ssimae, marker="o", ms=3, color="k", lw=1)
    if log.best_epoch:
        ax_val.axvline(log.best_epoch, color="tab:red", ls="--", lw=1, label=f"best epoch {log.best_epoch}")
        ax_val.legend(frameon=False)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation SSIMAE")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trajectories(trajs: Sequence[DepthTrajectory], path: Path | str, n_pixels: int = 6, seed: int = 0) -> Path:
    """A few tracked-pixel trajectories and the distribution of per-pixel temporal std."""
    fig, (ax_tr, ax_hist) = plt.subplots(1, 2, figsize=(10, 3.8))
    rng = np.random.default_rng(seed)
    traj = max(trajs, key=lambda t: t.mono.shape[0])
    rows = rng.choice(traj.mono.shape[0], size=min(n_pixels, traj.mono.shape[0]), replace=False)
    frames = np.arange(traj.mono.shape[1])
    for i, row in enumerate(sorted(rows)):
        color = plt.cm.viridis(i / max(1, len(rows) - 1))
        ax_tr.plot(frames, traj.mono[row], color=color, lw=1.2)
        ax_tr.plot(frames, traj.disparity[row], color=color, lw=1, ls=":")
    ax_tr.set_xlabel(f"frame in section ({traj.clip_id})")
    ax_tr.set_ylabel("normalized inverse depth")
    ax_tr.set_title("solid: fitted prediction, dotted: disparity", fontsize=9)

    stds = np.concatenate([per_pixel_inconsistency(t) for t in trajs])
    ax_hist.hist(stds, bins=40, color="0.4")
    ax_hist.axvline(stds.mean(), color="tab:red", lw=1, label=f"mean {stds.mean():.4f}")
    ax_hist.set_xlabel("per-pixel temporal std")
    ax_hist.set_ylabel("tracked pixels")
    ax_hist.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison(rows: Sequence[dict], path: Path | str) -> Path:
    """Temporal inconsistency and SSIMAE per seed for each loss configuration.

    ``rows`` carry ``seed``, ``losses``, ``inconsistency`` and ``ssimae`` keys.
    """
    configs = list(dict.fromkeys(r["losses"] for r in rows))
    seeds = sorted({r["seed"] for r in rows})
    width = 0.8 / len(configs)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    for ax, key, label in [(axes[0], "inconsistency", "temporal inconsistency"), (axes[1], "ssimae", "test SSIMAE")]:
        for k, cfg in enumerate(configs):
            vals = [next(r[key] for r in rows if r["seed"] == s and r["losses"] == cfg) for s in seeds]
            ax.bar(np.arange(len(seeds)) + k * width, vals, width, label=cfg)
        ax.set_xticks(np.arange(len(seeds)) + width * (len(configs) - 1) / 2)
        ax.set_xticklabels([f"seed {s}" for s in seeds])
        ax.set_ylabel(label)
    axes[0].legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
