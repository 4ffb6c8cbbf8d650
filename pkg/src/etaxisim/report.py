"""Figure rendering for sweep tables.

Takes the runs CSV produced by run_sweep and draws one line chart per metric,
one line per arm (mean over seeds at each axis value), written as PNG files
alongside the delimited output unless another directory is given.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import SpecError
from .experiments import load_rows

DEFAULT_METRICS = ("passenger_avg_wait", "taxi_avg_idle",
                   "taxi_avg_queue_wait")

_LABELS = {
    "passenger_avg_wait": "mean passenger wait [s]",
    "taxi_avg_idle": "mean taxi idle time [s]",
    "taxi_avg_idle_with_charging": "mean taxi idle incl. charging [s]",
    "taxi_avg_queue_wait": "mean charger queue wait [s]",
}


def render_figures(csv_path, out_dir=None, metrics=DEFAULT_METRICS) -> list:
    """Render one PNG per metric next to the CSV; returns written paths."""
    csv_path = Path(csv_path)
    rows = load_rows(csv_path)
    if not rows:
        raise SpecError(f"{csv_path} holds no rows")
    out = Path(out_dir) if out_dir is not None else csv_path.parent
    out.mkdir(parents=True, exist_ok=True)
    axis = rows[0]["axis"]
    arms = []
    for r in rows:
        if r["arm"] not in arms:
            arms.append(r["arm"])

    written = []
    for metric in metrics:
        if metric not in rows[0]:
            raise SpecError(f"metric {metric!r} not in {csv_path}")
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for arm in arms:
            series = {}
            for r in rows:
                if r["arm"] != arm:
                    continue
                series.setdefault(r["value"], []).append(r[metric])
            xs = sorted(series)
            ys = [sum(series[x]) / len(series[x]) for x in xs]
            ax.plot(xs, ys, marker="o", label=arm)
        ax.set_xlabel(axis.replace("_", " "))
        ax.set_ylabel(_LABELS.get(metric, metric))
        if len(arms) > 1:
            ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out / f"{csv_path.stem}_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
