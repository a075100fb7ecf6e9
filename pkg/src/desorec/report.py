"""Comparison tables and figures rendered from run reports.

Tables are markdown with the best mean per metric in bold; figures go to
PNG next to the delimited output.  The sweep heatmap shows the raw grid
without interpolation and overlays the coupled-equivalent weighting curve
when the runs carry a mean target confidence.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .loss import redline_lambda2
from .train import RunReport

METRIC_COLUMNS = ("R@20", "N@20", "R@10", "N@10")


def group_by_label(reports: list[RunReport]) -> dict[str, list[RunReport]]:
    grouped: dict[str, list[RunReport]] = {}
    for report in reports:
        grouped.setdefault(report.label, []).append(report)
    return grouped


def _mean_std(group: list[RunReport], column: str) -> tuple[float, float]:
    values = np.array([r.test_metrics[column] for r in group])
    return float(values.mean()), float(values.std())


def markdown_table(reports: list[RunReport]) -> str:
    """One row per method: mean +/- std over seeds, best mean bolded."""
    grouped = group_by_label(reports)
    labels = sorted(grouped)
    means = {c: {l: _mean_std(grouped[l], c) for l in labels}
             for c in METRIC_COLUMNS}
    best = {c: max(means[c], key=lambda l: means[c][l][0]) for c in METRIC_COLUMNS}

    lines = ["| method | seeds | " + " | ".join(METRIC_COLUMNS) + " |",
             "|---|---|" + "---|" * len(METRIC_COLUMNS)]
    for label in labels:
        cells = [label, str(len(grouped[label]))]
        for column in METRIC_COLUMNS:
            mean, std = means[column][label]
            text = f"{mean:.4f} ± {std:.4f}" if len(grouped[label]) > 1 else f"{mean:.4f}"
            if label == best[column]:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def plot_metric_bars(reports: list[RunReport], path) -> None:
    """Grouped bars per method over the four metric columns."""
    grouped = group_by_label(reports)
    labels = sorted(grouped)
    x = np.arange(len(METRIC_COLUMNS))
    width = 0.8 / max(len(labels), 1)

    fig, ax = plt.subplots(figsize=(7, 4))
    for i, label in enumerate(labels):
        means = [_mean_std(grouped[label], c)[0] for c in METRIC_COLUMNS]
        stds = [_mean_std(grouped[label], c)[1] for c in METRIC_COLUMNS]
        ax.bar(x + i * width, means, width, yerr=stds, capsize=3, label=label)
    ax.set_xticks(x + width * (len(labels) - 1) / 2)
    ax.set_xticklabels(METRIC_COLUMNS)
    ax.set_ylabel("metric value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_sweep_csv(cells: list[dict], keys: list[str], path) -> None:
    """Long-format table, one row per grid cell; failures keep their row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(list(keys) + list(METRIC_COLUMNS) + ["status"]) + "\n")
        for cell in cells:
            row = [repr(cell["overrides"][key]) for key in keys]
            if cell["report"] is not None:
                row += [f"{cell['report'].test_metrics[c]:.6f}"
                        for c in METRIC_COLUMNS]
                row.append("ok")
            else:
                row += [""] * len(METRIC_COLUMNS)
                row.append("failed")
            fh.write(",".join(row) + "\n")


def plot_sweep_heatmap(cells: list[dict], path, metric: str = "N@10") -> bool:
    """Raw lambda1 x lambda2 heatmap of one metric.

    Returns False (and renders nothing) when the cells do not form a
    two-parameter trade-off grid.
    """
    ok = [c for c in cells if c["report"] is not None]
    if not ok or any(not {"lambda1", "lambda2"} <= set(c["overrides"])
                     for c in cells):
        return False
    l1s = sorted({c["overrides"]["lambda1"] for c in cells})
    l2s = sorted({c["overrides"]["lambda2"] for c in cells})
    if len(l1s) < 2 or len(l2s) < 2:
        return False

    grid = np.full((len(l2s), len(l1s)), np.nan)
    for cell in ok:
        i = l2s.index(cell["overrides"]["lambda2"])
        j = l1s.index(cell["overrides"]["lambda1"])
        grid[i, j] = cell["report"].test_metrics[metric]

    def edges(values):
        v = np.asarray(values, dtype=float)
        mid = (v[1:] + v[:-1]) / 2.0
        return np.concatenate(([v[0] - (mid[0] - v[0])], mid,
                               [v[-1] + (v[-1] - mid[-1])]))

    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.pcolormesh(edges(l1s), edges(l2s), grid, cmap="viridis")
    ax.set_xlabel("lambda1 (soft vs hard label weight)")
    ax.set_ylabel("lambda2 (target-confidence weight)")
    fig.colorbar(im, ax=ax, label=metric)
    for cell in ok:
        ax.annotate(f"{cell['report'].test_metrics[metric]:.3f}",
                    (cell["overrides"]["lambda1"], cell["overrides"]["lambda2"]),
                    ha="center", va="center", fontsize=7, color="white")

    confidences = [c["report"].provenance.get("mean_target_confidence")
                   for c in ok]
    confidences = [c for c in confidences if c is not None]
    if confidences:
        mean_qy = float(np.mean(confidences))
        xs = np.linspace(edges(l1s)[0], edges(l1s)[-1], 100)
        ys = np.array([redline_lambda2(x, mean_qy) for x in xs])
        inside = (ys >= edges(l2s)[0]) & (ys <= edges(l2s)[-1])
        if inside.any():
            ax.plot(xs[inside], ys[inside], "r--", linewidth=1.5,
                    label="coupled-equivalent lambda2")
            ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True
