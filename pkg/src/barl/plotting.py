"""Learning-curve figures written as SVG next to the CSV logs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import FuncFormatter, LogLocator, NullFormatter  # noqa: E402

from barl.loop import STRATEGIES  # noqa: E402

STYLE = {
    "svg.fonttype": "none",     # keep tick labels as text
    "svg.hashsalt": "barl",     # stable element ids
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.8, 3.2),
}

COLORS = {"barl": "#1f4e9c", "eig_t": "#c0392b", "random": "#7f7f7f", "rollout_mpc": "#2e8b57"}


def _power_of_ten(x, _pos):
    return f"{x:g}" if x >= 1 else ""


def aggregate(runs):
    """Mean return and standard error across seeds at each query count.

    With a single seed the band is that run's own evaluation SE.
    """
    by_n: dict = {}
    for r in runs:
        for n, mean, se in r.curve:
            by_n.setdefault(n, []).append((mean, se))
    xs = np.array(sorted(by_n))
    mean = np.empty(len(xs))
    se = np.empty(len(xs))
    for i, n in enumerate(xs):
        vals = np.array(by_n[n])
        mean[i] = vals[:, 0].mean()
        if len(vals) > 1:
            se[i] = vals[:, 0].std(ddof=1) / math.sqrt(len(vals))
        else:
            se[i] = vals[0, 1]
    return xs, mean, se


def learning_curve_figure(env: str, runs):
    """One line per strategy with a shaded standard-error band; log query axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups: dict = {}
        for r in runs:
            groups.setdefault(r.strategy, []).append(r)
        order = sorted(groups, key=lambda s: (STRATEGIES.index(s) if s in STRATEGIES else 99, s))
        for strategy in order:
            xs, mean, se = aggregate(groups[strategy])
            color = COLORS.get(strategy)
            ax.plot(xs, mean, color=color, lw=1.4, label=strategy)
            ax.fill_between(xs, mean - se, mean + se, color=color, alpha=0.2, lw=0)
        gt = np.mean([r.gt_return for r in runs])
        ax.axhline(gt, color="k", ls="--", lw=0.8, label="ground-truth MPC")
        ax.set_xscale("log")
        ax.xaxis.set_major_locator(LogLocator(base=10.0))
        ax.xaxis.set_major_formatter(FuncFormatter(_power_of_ten))
        ax.xaxis.set_minor_formatter(NullFormatter())
        ax.set_xlabel("queries")
        ax.set_ylabel("evaluation return")
        ax.set_title(env)
        ax.legend(loc="lower right")
        fig.tight_layout()
    return fig, ax


def save_learning_curve(env: str, runs, path) -> Path:
    fig, _ = learning_curve_figure(env, runs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
