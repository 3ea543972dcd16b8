"""Learning-curve figures from metrics CSV files.

Runs sharing a label are drawn as their mean with a +/- one standard
deviation band.  Rendering uses the Agg backend so no display is needed.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}
PANELS = (("eval_loss", "eval cross-entropy"), ("eval_accuracy", "eval accuracy"))


def read_metrics(path):
    """Columns of a metrics CSV as float arrays (blank cells become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]}


def _label_for(path):
    # <label>/<seed dir>/metrics.csv groups seeds; a bare run uses its own directory
    path = Path(path)
    return path.parent.parent.name if path.parent.name.startswith("seed") else path.parent.name


def group_runs(paths, labels=None):
    groups = defaultdict(list)
    for i, p in enumerate(paths):
        label = labels[i] if labels else _label_for(p)
        m = read_metrics(p)
        if m:
            groups[label].append(m)
    return groups


def _band(runs, key):
    n = min(len(r["batch"]) for r in runs)
    x = runs[0]["batch"][:n]
    ys = np.stack([r[key][:n] for r in runs])
    return x, np.nanmean(ys, axis=0), np.nanstd(ys, axis=0)


def plot_runs(paths, out_path, labels=None, title=None, panels=PANELS):
    """Write a row of panels (loss, accuracy by default) to ``out_path``."""
    groups = group_runs(paths, labels)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 2.8), squeeze=False)
        for ax, (key, ylabel) in zip(axes[0], panels):
            for label, runs in groups.items():
                if key not in runs[0]:
                    continue
                x, mean, std = _band(runs, key)
                (line,) = ax.plot(x, mean, lw=1.2, label=label)
                if len(runs) > 1:
                    ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, lw=0)
            ax.set_xlabel("batch")
            ax.set_ylabel(ylabel)
        if any(ax.get_legend_handles_labels()[0] for ax in axes[0]):
            axes[0][-1].legend(loc="best")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path)
        plt.close(fig)
    return out_path
