#!/usr/bin/env python3
"""
Desk-scale twin experiment, end to end, followed by the ordering checks.

Runs every pipeline stage through the command-line front end on the 40×20
grid (8 repetitions, 64 cycles, a 300-cycle SC dataset, 3 learning-curve
seeds at 64 pairs), forecasts the corrected variants with daily and frozen
corrections, writes the report and then checks the variant orderings in
the result tables. Takes well over an hour on one core; use --jobs.

    uv run demo/desk_scale_acceptance.py --output desk_results --jobs 8
    uv run demo/desk_scale_acceptance.py --output desk_results --check-only
"""

import argparse
import sys
import time
from pathlib import Path

import tomli_w

from pynn4dvar.acceptance import check_results
from pynn4dvar.cli import run

ALL_VARIANTS = ["SC", "WC", "SC-NNt", "SC-NNa", "NN"]
CORRECTED = ["SC-NNt", "SC-NNa", "NN"]

DESK_SCALE = {
    "seed": 0,
    "experiment": {
        "total_cycles": 64,
        "repetitions": 8,
        "dataset_cycles": 300,
        "forecast_days": 3,
        "forecast_stride": 4,
        "forecast_launches": 16,
    },
    "training": {"n_pairs": 256, "n_nets": 4, "learning_curve": [64], "learning_curve_seeds": 3},
}


def write_config(directory: Path, name: str, out: Path, variants: list[str], policy: str = "daily") -> Path:
    data = {**DESK_SCALE, "output_dir": str(out)}
    data["experiment"] = {**DESK_SCALE["experiment"], "variants": variants, "correction_policy": policy}
    path = directory / f"{name}.toml"
    path.write_text(tomli_w.dumps(data))
    return path


def stage(command: str, config: Path, jobs: int) -> None:
    print(f"\n=== {command} ({config.stem}) ===")
    start = time.time()
    code = run([command, "--config", str(config), "--jobs", str(jobs)])
    if code != 0:
        print(f"❌ {command} failed with exit code {code}")
        sys.exit(code)
    print(f"✓ {command} finished in {time.time() - start:.0f} s")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--output", type=Path, default=Path("desk_results"))
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--check-only", action="store_true", help="only check an existing results directory")
    args = parser.parse_args()

    out = args.output
    if not args.check_only:
        out.mkdir(parents=True, exist_ok=True)
        uncorrected = write_config(out, "uncorrected", out, ["SC", "WC"])
        corrected = write_config(out, "corrected", out, ["SC-NNt", "SC-NNa"])
        daily = write_config(out, "all_daily", out, ALL_VARIANTS)
        frozen = write_config(out, "frozen", out, CORRECTED, policy="frozen")

        stage("truth", uncorrected, args.jobs)
        stage("observe", uncorrected, args.jobs)
        stage("assimilate", uncorrected, args.jobs)
        stage("train-offline", uncorrected, args.jobs)
        stage("assimilate", corrected, args.jobs)
        stage("run-online", corrected, args.jobs)
        stage("forecast", daily, args.jobs)
        stage("forecast", frozen, args.jobs)
        stage("report", daily, args.jobs)

    print("\n=== Orderings ===")
    checks = check_results(out)
    for check in checks:
        print(check)
    if all(c.passed for c in checks):
        print("\n✅ All desk-scale orderings hold")
        return 0
    print("\n❌ Some desk-scale orderings do not hold")
    return 1


if __name__ == "__main__":
    sys.exit(main())
