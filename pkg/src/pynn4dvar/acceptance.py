"""
Orderings a desk-scale run has to reproduce.

Each check reads result tables written by the command-line front end and
returns a Check with a one-line explanation. Absolute RMSE or MSE values
are never compared; only the relative behaviour of the variants is.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from pynn4dvar.exceptions import DataError
from pynn4dvar.experiments import (
    CYCLE_HEADER,
    FORECAST_HEADER,
    load_records_dir,
    summarize_forecasts,
)
from pynn4dvar.serialization import read_table

logger = logging.getLogger(__name__)

CORRECTED = ("SC-NNt", "SC-NNa", "NN")


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def __str__(self) -> str:
        return f"{'✓' if self.passed else '✗'} {self.name}: {self.detail}"


def _enough(wins: int, total: int, fraction: float) -> bool:
    return total > 0 and wins >= math.ceil(fraction * total - 1e-9)


def check_offline_learning(
    rows: Sequence[Mapping[str, str]], min_pairs: int = 64, fraction: float = 2 / 3,
) -> Check:
    """
    Every net trained on at least `min_pairs` pairs beats the zero correction,
    and for each training-set size the truth-trained net beats the
    analysis-trained one with the same seed in at least `fraction` of seeds.
    """
    name = "offline learning"
    large = [r for r in rows if int(r["n_pairs"]) >= min_pairs]
    if not large:
        return Check(name, False, f"no nets trained on ≥{min_pairs} pairs")
    worst = max(float(r["normalized_mse"]) for r in large)
    if worst >= 1.0:
        return Check(name, False, f"normalized test MSE {worst:.3f} ≥ 1")

    scores: dict[tuple[int, int], dict[str, float]] = {}
    for r in large:
        scores.setdefault((int(r["n_pairs"]), int(r["seed"])), {})[r["source"]] = float(r["normalized_mse"])
    details = []
    passed = True
    for n_pairs in sorted({key[0] for key in scores}):
        paired = [s for (n, _), s in scores.items() if n == n_pairs and {"truth", "analysis"} <= s.keys()]
        wins = sum(s["truth"] < s["analysis"] for s in paired)
        passed &= _enough(wins, len(paired), fraction)
        details.append(f"N={n_pairs}: truth better in {wins}/{len(paired)}")
    return Check(name, passed, f"worst MSE {worst:.3f}; " + ", ".join(details))


def check_variant_ordering(summary: Sequence[Mapping[str, str]]) -> Check:
    """SC has the largest first-guess RMSE of SC/WC/SC-NNt/SC-NNa and the largest analysis RMSE overall."""
    name = "variant ordering"
    fg = {r["variant"]: float(r["fg_rmse_mean"]) for r in summary}
    an = {r["variant"]: float(r["an_rmse_mean"]) for r in summary}
    missing = [v for v in ("SC", "WC", "SC-NNt", "SC-NNa") if v not in fg]
    if missing:
        return Check(name, False, f"no summary for {', '.join(missing)}")
    fg_ok = all(fg["SC"] > fg[v] for v in ("WC", "SC-NNt", "SC-NNa"))
    an_ok = all(an["SC"] > value for v, value in an.items() if v != "SC")
    detail = "first guess " + ", ".join(f"{v} {fg[v]:.4f}" for v in fg) + "; analysis SC " + f"{an['SC']:.4f}"
    return Check(name, fg_ok and an_ok, detail)


def _mean_fg(table: Sequence[Mapping[str, str]], cycles: set[int]) -> float:
    return float(np.mean([float(r["fg_rmse"]) for r in table if int(r["cycle"]) in cycles]))


def check_online_improvement(
    online: Sequence[Sequence[Mapping[str, str]]],
    offline: Sequence[Sequence[Mapping[str, str]]],
    last: int = 16,
    fraction: float = 0.75,
) -> Check:
    """Online NN beats SC-NNa in first-guess RMSE over the last `last` cycles in `fraction` of repetitions."""
    name = "online improvement"
    if not online or len(online) != len(offline):
        return Check(name, False, f"{len(online)} NN against {len(offline)} SC-NNa repetitions")
    wins = 0
    for nn, frozen in zip(online, offline):
        common = sorted({int(r["cycle"]) for r in nn} & {int(r["cycle"]) for r in frozen})
        if len(common) < last:
            return Check(name, False, f"a repetition shares only {len(common)} cycles")
        tail = set(common[-last:])
        wins += _mean_fg(nn, tail) < _mean_fg(frozen, tail)
    return Check(name, _enough(wins, len(online), fraction), f"NN better in {wins}/{len(online)} repetitions")


def check_frozen_correction(
    forecasts: Mapping[str, Sequence[Sequence[Mapping[str, str]]]],
    lead_hours: int = 48,
    min_launches: int = 64,
) -> Check:
    """For every corrected variant forecast both ways, frozen correction is no worse at `lead_hours`."""
    name = "frozen correction"
    summary = {(v, lead): mean for v, lead, mean, _ in summarize_forecasts(forecasts)}
    details = []
    passed = True
    for variant in CORRECTED:
        frozen = f"{variant}-frozen"
        if frozen not in forecasts or variant not in forecasts:
            continue
        launches = sum(len({r["launch_cycle"] for r in rep}) for rep in forecasts[frozen])
        a, b = summary.get((frozen, lead_hours)), summary.get((variant, lead_hours))
        if a is None or b is None:
            return Check(name, False, f"{variant} has no {lead_hours} h lead")
        passed &= launches >= min_launches and a <= b
        details.append(f"{variant} frozen {a:.4f} vs daily {b:.4f} over {launches} launches")
    if not details:
        return Check(name, False, "no variant forecast with both policies")
    return Check(name, passed, "; ".join(details))


def _tables(out: Path, prefix: str, header) -> dict[str, list[list[dict]]]:
    return {v: [read_table(p, header) for p in paths] for v, paths in load_records_dir(out, prefix).items()}


def check_results(out: Path, last_cycles: int = 16, min_launches: int = 64) -> list[Check]:
    """
    All orderings over the tables in a results directory.

    Raises:
        DataError: If a required table is missing
    """
    out = Path(out)
    cycles = _tables(out, "cycles", CYCLE_HEADER)
    for variant in ("NN", "SC-NNa"):
        if variant not in cycles:
            raise DataError(f"No cycle tables for {variant}", str(out))
    checks = [
        check_offline_learning(read_table(out / "offline_test_mse.csv")),
        check_variant_ordering(read_table(out / "summary_cycles.csv")),
        check_online_improvement(cycles["NN"], cycles["SC-NNa"], last_cycles),
        check_frozen_correction(_tables(out, "forecast", FORECAST_HEADER), min_launches=min_launches),
    ]
    for check in checks:
        logger.log(logging.INFO if check.passed else logging.WARNING, "%s", check)
    return checks
