"""Figures written next to the tidy CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata without a version string keeps reruns byte-identical.
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}

_MARKERS = {"random": "s", "node": "o", "timestamp": "^", "block": "D"}


def rate_sweep_figure(rows, path, metrics=("rmse", "mae", "aiw")):
    """Metric-vs-missing-rate curves, one panel per metric, one line per (model, pattern)."""
    metrics = [m for m in metrics if any(r["metric"] == m for r in rows)]
    if not metrics:
        return None
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.4 * len(metrics), 3.0), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            series = {}
            for r in rows:
                if r["metric"] != metric or r["value"] is None:
                    continue
                series.setdefault((r["model"], r["pattern"]), []).append((r["rate"], r["value"]))
            for (model, pattern), pts in sorted(series.items()):
                pts.sort()
                ax.plot(
                    [p[0] * 100 for p in pts], [p[1] for p in pts],
                    marker=_MARKERS.get(pattern, "."), linestyle="-" if model != "HA" else "--",
                    label=f"{model} / {pattern}",
                )
            ax.set_xlabel("missing rate (%)")
            ax.set_ylabel(metric.upper())
        axes[0][0].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
    return path


def training_curve_figure(curves, path):
    """Loss per epoch for each particle; ``curves`` maps particle index to [(epoch, loss, lr)]."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for m, curve in sorted(curves.items()):
            if curve:
                ax.plot([c[0] for c in curve], [c[1] for c in curve], lw=1, label=f"particle {m}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("negative log-posterior")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
    return path
