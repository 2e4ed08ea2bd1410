"""Static figures written next to the CSV/JSON reports."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _values(xs):
    return np.array([np.nan if x is None else float(x) for x in xs])


def plot_stability(report, path):
    """Per-transition score, temperature and minimum pair distances."""
    steps = np.array(report.steps)
    fig, axes = plt.subplots(3, 1, figsize=(6, 7), sharex=True)
    scores = [s.value for s in report.scores]
    axes[0].plot(steps[1:], scores, marker=".")
    axes[0].set_ylabel("S_index")
    axes[0].set_title(f"s_index = {report.s_index:.4f}" + ("  (crashed)" if report.crashed else ""))
    axes[1].plot(steps, _values(report.temperatures))
    axes[1].axhline(report.config.get("T_set", np.nan), color="k", ls="--", lw=0.8)
    axes[1].set_ylabel("T (K)")
    for pair, series in report.r_min.items():
        axes[2].plot(steps, _values(series), label=pair)
    axes[2].set_ylabel("min distance (A)")
    axes[2].set_xlabel("step")
    axes[2].legend(fontsize=8)
    return _save(fig, path)


def plot_rdfs(rdfs: Sequence, labels: Sequence[str], path, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    for rdf, label in zip(rdfs, labels):
        ax.plot(rdf.r, rdf.g, label=label)
    ax.axhline(1.0, color="k", lw=0.6, ls=":")
    ax.set_xlabel("r (A)")
    ax.set_ylabel("g(r)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_metrics(history: Sequence[dict], path):
    """Training losses, coefficient and validation MAE against epoch."""
    epochs = np.array([row["epoch"] for row in history])
    fig, axes = plt.subplots(3, 1, figsize=(6, 7), sharex=True)
    for key in ("loss_f", "loss_e"):
        axes[0].semilogy(epochs, _values([r[key] for r in history]), label=key)
    axes[0].legend(fontsize=8)
    axes[1].plot(epochs, _values([r["loss_corr"] for r in history]), label="loss_corr")
    axes[1].plot(epochs, _values([r["c_corr"] for r in history]), label="c_corr")
    axes[1].legend(fontsize=8)
    fmae = _values([r["FMAE_val"] for r in history])
    ok = np.isfinite(fmae)
    axes[2].plot(epochs[ok], fmae[ok], marker=".")
    axes[2].set_ylabel("FMAE val (meV/A)")
    axes[2].set_xlabel("epoch")
    return _save(fig, path)


def plot_corr_matrix(matrix, path, title=""):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(np.asarray(matrix), vmin=0.0, vmax=1.0, cmap="viridis")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    return _save(fig, path)
