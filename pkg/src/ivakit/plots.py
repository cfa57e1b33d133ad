"""SVG figures for experiment curves.

Matplotlib's SVG backend embeds random element ids and a creation date by
default; both are pinned here so that reruns produce identical files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_curve(cfg, curve, path) -> None:
    """ISR against the grid variable on a log axis, one line per V, with bounds dashed."""
    label = "lags" if cfg.kind.value == "jdiag_lags" else "beta"
    with matplotlib.rc_context({"svg.hashsalt": "ivakit", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for i, v in enumerate(sorted({c["v_samples"] for c in curve})):
            pts = [c for c in curve if c["v_samples"] == v]
            xs = [c[label] for c in pts]
            color = f"C{i}"
            ys = [c["isr"] if c["isr"] > 0 else math.nan for c in pts]
            ax.plot(xs, ys, "o-", color=color, label=f"observed, V={v}")
            bs = [c["bound"] if c["bound_finite"] else math.nan for c in pts]
            ax.plot(xs, bs, "--", color=color, label=f"bound, V={v}")
            for c in pts:
                if not c["bound_finite"]:
                    ax.axvline(c[label], color=color, alpha=0.3, lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("number of lags" if label == "lags" else "shape parameter beta")
        ax.set_ylabel("normalized ISR")
        if label == "beta":
            ax.set_xscale("log", base=2)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
