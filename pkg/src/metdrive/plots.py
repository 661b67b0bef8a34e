"""Figure rendering for the report path: speed traces of episode logs and
training loss curves, written as PNG files next to the delimited reports.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .domain import EpisodeLog


def plot_speed_trace(log: EpisodeLog, path, title: str = "speed trace") -> str:
    """Speed-over-time profile of one episode in km/h."""
    fig, ax = plt.subplots(figsize=(7.0, 3.0))
    ax.plot(log.times(), log.speeds() * 3.6, lw=1.2)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("speed [km/h]")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def plot_loss_curve(records, path, title: str = "training loss") -> str:
    """Per-epoch mean training loss."""
    epochs = [r["epoch"] for r in records]
    vals = [r["loss"] for r in records]
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(epochs, vals, marker="o", ms=3, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if vals and min(vals) > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)


def plot_route_overview(log: EpisodeLog, path, title: str = "route") -> str:
    """Driven path over the route polyline."""
    poses = log.poses()
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.plot(log.route.targets[:, 0], log.route.targets[:, 1], "k--", lw=1.0, label="route")
    ax.plot(poses[:, 0], poses[:, 1], lw=1.4, label="driven")
    ax.scatter(*log.route.targets[-1], marker="*", s=80, zorder=3)
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return str(path)
