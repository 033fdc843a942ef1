"""Figure rendering for estimation runs and simulation reports.

Every function writes one PNG next to the delimited outputs and returns
the path.  Rendering is headless (Agg); styling is kept plain so the
figures read well in both reports and terminals that preview images.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .hazards import CumHazEstimate
from .model import TransitionModel
from .probtrans import ProbTransEstimate

plt.rcParams.update(
    {
        "figure.dpi": 110,
        "savefig.dpi": 150,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "legend.fontsize": 8,
        "axes.titlesize": 10,
        "axes.labelsize": 9,
    }
)

_KIND_STYLE = {"observed": "-", "excess": "-", "population": "--"}


def _trans_label(model: TransitionModel, trans_id: int) -> str:
    t = model.transition(trans_id)
    frm, to = model.extended_endpoints(trans_id)
    return f"{model.ext_state_names[frm - 1]} -> {model.ext_state_names[to - 1]}"


def fig_hazards(
    estimates: dict[int, CumHazEstimate],
    model: TransitionModel,
    path: str | Path,
    time_unit_days: float = 365.241,
) -> Path:
    """Staircase plot of all cumulative hazard estimates."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for tid in sorted(estimates):
        est = estimates[tid]
        if est.daily_times is not None:
            x, y = est.daily_times, est.daily_values
            ax.plot(x / time_unit_days, y, _KIND_STYLE[est.kind],
                    label=_trans_label(model, tid), lw=1.2)
        elif len(est.times):
            x = np.concatenate([[0.0], est.times])
            y = np.concatenate([[0.0], est.values])
            ax.step(x / time_unit_days, y, where="post",
                    linestyle=_KIND_STYLE[est.kind],
                    label=_trans_label(model, tid), lw=1.2)
    ax.set_xlabel("years since origin")
    ax.set_ylabel("cumulative hazard")
    ax.set_title("Cumulative transition hazards")
    ax.legend(loc="upper left")
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def fig_probabilities(
    pt: ProbTransEstimate,
    path: str | Path,
    from_state: int = 1,
    time_unit_days: float = 365.241,
) -> Path:
    """Occupancy probabilities over time from one starting state."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = np.concatenate([[pt.s], pt.times]) / time_unit_days
    for j, name in enumerate(pt.state_names):
        start = 1.0 if j == from_state - 1 else 0.0
        y = np.concatenate([[start], pt.probs[:, from_state - 1, j]])
        ax.plot(x, y, label=name, lw=1.3)
    ax.set_xlabel("years since origin")
    ax.set_ylabel(f"P(state at t | {pt.state_names[from_state - 1]} at s)")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("Transition probabilities")
    ax.legend(loc="center right")
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _target_panels(report: pd.DataFrame):
    times = sorted(report["time_years"].unique())
    fig, axes = plt.subplots(
        2, (len(times) + 1) // 2, figsize=(11, 6.5), sharex=True
    )
    return fig, np.ravel(axes), times


def fig_relative_bias(report: pd.DataFrame, path: str | Path) -> Path:
    """Relative bias per target, one panel per evaluation time."""
    fig, axes, times = _target_panels(report)
    for ax, t in zip(axes, times):
        sub = report[report["time_years"] == t]
        ax.axhline(0.0, color="k", lw=0.8)
        ax.plot(sub["target"], sub["rel_bias"], "o", ms=5)
        ax.set_title(f"{t:g} years")
        ax.tick_params(axis="x", rotation=75)
        ax.set_ylabel("relative bias")
    fig.suptitle(f"Relative bias ({report['scenario'].iloc[0]}, "
                 f"n={report['n'].iloc[0]}, {report['n_sim'].iloc[0]} reps)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def fig_standard_errors(report: pd.DataFrame, path: str | Path) -> Path:
    """Empirical vs estimated standard errors per target and time."""
    fig, axes, times = _target_panels(report)
    for ax, t in zip(axes, times):
        sub = report[report["time_years"] == t]
        ax.plot(sub["target"], sub["empirical_se"], "ko", ms=6, label="empirical")
        ax.plot(sub["target"], sub["mean_greenwood_se"], "s", ms=4,
                label="Greenwood", alpha=0.85)
        ax.plot(sub["target"], sub["mean_boot_se"], "^", ms=4,
                label="bootstrap", alpha=0.85)
        ax.set_title(f"{t:g} years")
        ax.set_yscale("log")
        ax.tick_params(axis="x", rotation=75)
        ax.set_ylabel("standard error")
    axes[0].legend()
    fig.suptitle(f"Standard errors ({report['scenario'].iloc[0]})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def fig_coverage(report: pd.DataFrame, path: str | Path, level: float = 0.95) -> Path:
    """Coverage probability per interval method, target and time."""
    methods = [c.removeprefix("coverage_") for c in report.columns
               if c.startswith("coverage_")]
    fig, axes, times = _target_panels(report)
    markers = "osd^v<>"
    for ax, t in zip(axes, times):
        sub = report[report["time_years"] == t]
        ax.axhline(level, color="k", lw=0.8, linestyle=":")
        for mi, m in enumerate(methods):
            ax.plot(sub["target"], sub[f"coverage_{m}"],
                    markers[mi % len(markers)], ms=5, label=m, alpha=0.85)
        ax.set_title(f"{t:g} years")
        ax.set_ylim(0.0, 1.02)
        ax.tick_params(axis="x", rotation=75)
        ax.set_ylabel("coverage")
    axes[0].legend(loc="lower left")
    fig.suptitle(f"Coverage probabilities ({report['scenario'].iloc[0]})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path
