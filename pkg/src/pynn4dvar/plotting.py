"""
Static SVG line charts for the report command.

Charts are rendered with matplotlib's Agg/SVG backend with a fixed hash
salt and no date metadata, so the same tables always give the same bytes.
"""

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure  # noqa: E402

from pynn4dvar.serialization import atomic_write  # noqa: E402

_RC = {
    "svg.hashsalt": "pynn4dvar",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def _save(fig: Figure, path: str | Path) -> Path:
    buffer = io.BytesIO()
    with matplotlib.rc_context(_RC):
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    return atomic_write(path, buffer.getvalue())


def plot_rmse_vs_cycle(rows: Sequence[tuple], path: str | Path) -> Path:
    """
    First-guess and analysis RMSE per cycle (thin) and their running means (thick), one colour per variant.

    Args:
        rows: (variant, cycle, fg, an, fg_running, an_running) tuples
    """
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(8.0, 4.5))
        ax = fig.subplots()
        variants = list(dict.fromkeys(r[0] for r in rows))
        for k, variant in enumerate(variants):
            mine = [r for r in rows if r[0] == variant]
            colour = f"C{k}"
            cycles = [r[1] for r in mine]
            ax.plot(cycles, [r[2] for r in mine], color=colour, lw=0.6, alpha=0.5)
            ax.plot(cycles, [r[4] for r in mine], color=colour, lw=2.0, label=f"{variant} first guess")
            ax.plot(cycles, [r[5] for r in mine], color=colour, lw=2.0, ls="--", label=f"{variant} analysis")
        ax.set_xlabel("cycle")
        ax.set_ylabel("RMSE")
        if variants:
            ax.legend(fontsize="small", ncol=2)
        fig.tight_layout()
    return _save(fig, path)


def plot_rmse_vs_lead(rows: Sequence[tuple], path: str | Path) -> Path:
    """
    Forecast RMSE against lead time in days, one line per variant.

    Args:
        rows: (variant, lead_hours, mean, std) tuples
    """
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(8.0, 4.5))
        ax = fig.subplots()
        variants = list(dict.fromkeys(r[0] for r in rows))
        for k, variant in enumerate(variants):
            mine = [r for r in rows if r[0] == variant]
            ax.plot([r[1] / 24 for r in mine], [r[2] for r in mine], color=f"C{k}", label=variant)
        ax.set_xlabel("lead time (days)")
        ax.set_ylabel("RMSE")
        if variants:
            ax.legend(fontsize="small")
        fig.tight_layout()
    return _save(fig, path)
