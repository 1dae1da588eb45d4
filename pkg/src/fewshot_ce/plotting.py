"""SVG renderings of result CSVs. A plot is a pure function of its CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import read_results  # noqa: E402

_RC = {"svg.hashsalt": "fewshot-ce", "svg.fonttype": "none", "path.simplify": False}


def _curves(rows, x: str, series: str):
    """``series -> (xs, median over seeds of per-seed mean MSE)``."""
    acc: dict[str, dict[float, dict[int, list[float]]]] = {}
    for r in rows:
        key = getattr(r, series)
        acc.setdefault(key, {}).setdefault(float(getattr(r, x)), {}).setdefault(r.seed, []).append(r.mse)
    out = {}
    for key in sorted(acc):
        xs = sorted(acc[key])
        ys = [float(np.median([np.mean(v) for v in acc[key][xv].values()])) for xv in xs]
        out[key] = (xs, ys)
    return out


def plot_csv(csv_path, svg_path, x: str = "snr_db", series: str = "model", title: str = "") -> Path:
    rows = read_results(csv_path)
    curves = _curves(rows, x, series)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 4.0))
        for key, (xs, ys) in curves.items():
            ax.plot(xs, ys, marker="o", label=key)
        ax.set_yscale("log")
        ax.set_xlabel({"snr_db": "SNR (dB)", "n_support": "support blocks n"}.get(x, x))
        ax.set_ylabel("MSE")
        if title:
            ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        if curves:
            ax.legend(fontsize=8)
        fig.tight_layout()
        svg_path = Path(svg_path)
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(svg_path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return svg_path
