"""Comparison figures written to PNG files (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .adp import Trajectory  # noqa: E402
from .dynamics import DemandTrace  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_comparison(trace: DemandTrace, flex: Trajectory, base: Trajectory, path) -> Path:
    """Speed plan, deviations, SoC, engine power and cumulative fuel for both strategies."""
    fig, axes = plt.subplots(6, 1, figsize=(8, 12), sharex=True)
    t = trace.t
    axes[0].plot(t, trace.v, "k-", lw=1)
    axes[0].set_ylabel("v plan [m/s]")
    series = [
        (lambda tr: tr.states[:, 0], "dx [m]", False),
        (lambda tr: tr.states[:, 1], "dv [m/s]", False),
        (lambda tr: 100 * tr.states[:, 2], "SoC [%]", False),
        (lambda tr: tr.p_e / 1000, "P_e [kW]", True),
        (lambda tr: tr.fuel_cum, "fuel [g]", False),
    ]
    for ax, (get, label, per_step) in zip(axes[1:], series):
        for tr, name, style in ((flex, "flexible", "C0-"), (base, "fixed demand", "C1--")):
            y = get(tr)
            if per_step:
                ax.step(t[: len(y)], y, style, where="post", label=name, lw=1)
            else:
                ax.plot(t[: len(y)], y, style, label=name, lw=1)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[1].legend(loc="best", fontsize=8)
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    return save_figure(fig, path)


def plot_trajectory(trace: DemandTrace, traj: Trajectory, path, title: str = "") -> Path:
    fig, axes = plt.subplots(4, 1, figsize=(8, 8), sharex=True)
    t = trace.t[: traj.n_steps + 1]
    axes[0].plot(t, traj.states[:, 0], label="dx [m]")
    axes[0].plot(t, traj.states[:, 1], label="dv [m/s]")
    axes[0].legend(fontsize=8)
    axes[1].plot(t, 100 * traj.states[:, 2])
    axes[1].set_ylabel("SoC [%]")
    axes[2].step(t[:-1], traj.inputs[:, 0], where="post")
    axes[2].set_ylabel("omega_e [rad/s]")
    axes[3].plot(t, traj.fuel_cum)
    axes[3].set_ylabel("fuel [g]")
    axes[3].set_xlabel("t [s]")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    return save_figure(fig, path)
