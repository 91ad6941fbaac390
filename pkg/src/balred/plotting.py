"""SVG figures of experiment reports: error against rank, one panel per t_e."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FLOOR = 1e-16
METRICS = {
    "foerstner": ("Förstner distance", lambda row: row.foerstner),
    "risk": ("excess Bayes risk (risk - d)", lambda row: row.excess_risk),
}


def _clamp(values):
    v = np.asarray(values, dtype=float)
    return np.where(np.isnan(v), np.nan, np.maximum(v, FLOOR))


def _figure(rows, model, metric):
    title, get = METRICS[metric]
    end_times = sorted({row.t_e for row in rows})
    methods = list(dict.fromkeys(row.method for row in rows))
    fig, axes = plt.subplots(1, len(end_times), figsize=(4.2 * len(end_times), 3.6),
                             squeeze=False, sharey=True)
    for ax, te in zip(axes[0], end_times):
        for method in methods:
            sel = sorted((r for r in rows if r.t_e == te and r.method == method),
                         key=lambda r: r.rank)
            if not sel:
                continue
            ax.plot([r.rank for r in sel], _clamp([get(r) for r in sel]),
                    marker="o", markersize=3, linewidth=1.2, label=method)
        ax.set_yscale("log")
        ax.set_ylim(bottom=FLOOR / 2)
        ax.set_xlabel("rank r")
        ax.set_title(f"t_e = {te:g}")
        ax.grid(True, which="major", linewidth=0.4)
    axes[0][0].set_ylabel(title)
    axes[0][-1].legend(fontsize="small")
    fig.suptitle(model)
    fig.tight_layout()
    return fig


def emit_svg_plots(report, path):
    """Write ``<model>_foerstner.svg`` and ``<model>_risk.svg`` into directory `path`.

    Values are clamped below at 1e-16 for the logarithmic axis; NaN rows
    (ranks a method could not reach) leave gaps.  Output is byte-stable for a
    given report.
    """
    if not report.rows:
        raise ValueError("report has no rows to plot")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "balred", "svg.fonttype": "path"}):
        for model in report.models:
            rows = [r for r in report.rows if r.model == model]
            for metric in METRICS:
                fig = _figure(rows, model, metric)
                target = out / f"{model}_{metric}.svg"
                fig.savefig(target, format="svg", metadata={"Date": None})
                plt.close(fig)
                written.append(target)
    return written


__all__ = ["emit_svg_plots", "FLOOR"]
