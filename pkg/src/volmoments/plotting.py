"""Term-structure figures for the price command."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}

RATE_KINDS = ("varianceSwap", "volatilitySwap", "corridorVarianceSwap", "conditionalVarianceSwap", "gammaSwap")


def _series(rows):
    by_name = defaultdict(list)
    for r in rows:
        by_name[(r["name"], r["kind"])].append((r["t"], r["headline"]))
    return {k: sorted(v) for k, v in by_name.items()}


def term_structure_figures(rows, out_dir) -> list:
    """One PNG for swap rates (volatility units) and one for option prices, if present.

    ``rows`` are summary dicts with keys name, kind, t and headline.
    """
    out_dir = Path(out_dir)
    series = _series(rows)
    groups = {
        "term_structure_rates.png": ({k: v for k, v in series.items() if k[1] in RATE_KINDS},
                                     "swap rate (vol units)"),
        "term_structure_options.png": ({k: v for k, v in series.items() if k[1] not in RATE_KINDS},
                                       "price"),
    }
    written = []
    with plt.rc_context(STYLE):
        for fname, (data, ylabel) in groups.items():
            if not data:
                continue
            fig, ax = plt.subplots()
            for (name, kind), pts in data.items():
                ts, vs = zip(*pts)
                ax.plot(ts, [100 * v for v in vs] if kind in RATE_KINDS else vs,
                        marker="o", ms=3, lw=1.2, label=name)
            ax.set_xlabel("maturity (years)")
            ax.set_ylabel(ylabel.replace("vol units", "%") if "rate" in ylabel else ylabel)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / fname
            fig.savefig(path, dpi=120, metadata={"Software": None})
            plt.close(fig)
            written.append(path)
    return written
