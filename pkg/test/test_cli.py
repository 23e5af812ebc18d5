#!/usr/bin/env python3
"""
End-to-end tests for the command-line front end: exit codes, manifests
and the report tables against checked-in golden files.
"""

import shutil
import sys
import tempfile
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import tomli_w

from pynn4dvar.cli import _training_records, forecast_path, run
from pynn4dvar.config import load_config
from pynn4dvar.covariances_obs import ObsNetwork
from pynn4dvar.experiments import load_records_dir
from pynn4dvar.fourdvar import Variant
from pynn4dvar.manifest import read_manifest
from pynn4dvar.serialization import read_checkpoint, read_table

DATA = Path(__file__).parent / "data"

SMALL_MODEL = {
    "reference": {"nx": 12, "ny": 8},
    "perturbed": {"nx": 12, "ny": 8, "dt_seconds": 1200.0, "top_depth": 5750.0, "bottom_depth": 4250.0},
}


def _write_config(tmp: Path, **sections) -> Path:
    network = tmp / "network.csv"
    ObsNetwork.quasi_random(12, 8).to_csv(network)
    data = {
        "seed": 3,
        "output_dir": str(tmp / "out"),
        "model": SMALL_MODEL,
        "observations": {"network": str(network)},
        "experiment": {"repetitions": 1, "relaxation_days": 0, "truth_days": 0, "total_cycles": 0},
    }
    for key, value in sections.items():
        data.setdefault(key, {}).update(value)
    path = tmp / "run.toml"
    path.write_text(tomli_w.dumps(data))
    return path


def test_truth_writes_checkpoint_and_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = _write_config(tmp)
        assert run(["truth", "--config", str(cfg)]) == 0

        out = tmp / "out"
        truth = read_checkpoint(out / "truth_rep000.ckpt")
        assert truth.data.shape == (1, 2, 8, 12)
        assert truth.extra["seed"] == "3"

        manifest = read_manifest(out)
        assert manifest.outputs == ["truth_rep000.ckpt"]
        assert "run.toml" in manifest.inputs
        assert len(manifest.config_sha256) == 64


def test_seed_override_changes_truth():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = _write_config(tmp)
        assert run(["truth", "--config", str(cfg), "--output", str(tmp / "a")]) == 0
        assert run(["truth", "--config", str(cfg), "--output", str(tmp / "b"), "--seed", "4"]) == 0
        a = read_checkpoint(tmp / "a" / "truth_rep000.ckpt")
        b = read_checkpoint(tmp / "b" / "truth_rep000.ckpt")
        assert a.extra["seed"] == "3" and b.extra["seed"] == "4"
        assert read_manifest(tmp / "a").config_sha256 != read_manifest(tmp / "b").config_sha256


def test_zero_cycles_gives_header_only_tables():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = _write_config(tmp, experiment={"variants": ["WC"]})
        for command in ("truth", "observe", "assimilate"):
            assert run([command, "--config", str(cfg)]) == 0, command

        out = tmp / "out"
        assert read_table(out / "obs_rep000.csv") == []
        cycles = (out / "cycles_WC_rep000.csv").read_text()
        assert cycles == "cycle,fg_rmse,an_rmse,cost_total,inner_iters\n"
        assert read_table(out / "minimizer_WC_rep000.csv") == []
        assert not (out / "states_WC_rep000.ckpt").exists()
        assert sorted(read_manifest(out).outputs) == ["cycles_WC_rep000.csv", "minimizer_WC_rep000.csv"]


def test_dataset_variant_runs_enough_cycles_for_training():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        path = _write_config(
            tmp,
            experiment={"total_cycles": 2, "forecast_days": 0},
            training={"n_pairs": 2, "learning_curve": [4]},
        )
        data = tomllib.loads(path.read_text())
        data["experiment"].pop("truth_days")
        path.write_text(tomli_w.dumps(data))
        for command in ("truth", "observe", "assimilate"):
            assert run([command, "--config", str(path)]) == 0, command

        cfg = load_config(path)
        assert cfg.dataset_cycles == 5 and cfg.truth_days == 5
        out = tmp / "out"
        assert [row["cycle"] for row in read_table(out / "cycles_SC_rep000.csv")] == ["0", "1"]
        assert read_checkpoint(out / "states_SC_rep000.ckpt").data.shape == (5, 2, 2, 8, 12)
        assert len(_training_records(cfg, "analysis", 0, 4)) == 5
        # learning-curve sets larger than n_pairs still find their truth pairs
        assert len(_training_records(cfg, "truth", 0, 4)) == 5


def test_frozen_forecasts_are_labelled():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        paths = [
            forecast_path(out, Variant.NN, 2, "frozen"),
            forecast_path(out, Variant.NN, 2, "daily"),
            forecast_path(out, Variant.WC, 0, "frozen"),
        ]
        assert [p.name for p in paths] == [
            "forecast_NN-frozen_rep002.csv", "forecast_NN_rep002.csv", "forecast_WC_rep000.csv",
        ]
        for p in paths:
            p.write_text("launch_cycle,lead_hours,rmse\n")
        assert sorted(load_records_dir(out, "forecast")) == ["NN", "NN-frozen", "WC"]


def test_configuration_errors_exit_1():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        bad = _write_config(tmp, experiment={"bogus": 1})
        assert run(["truth", "--config", str(bad)]) == 1
        assert run(["truth", "--config", str(tmp / "missing.toml")]) == 1
        good = _write_config(tmp)
        assert run(["truth", "--config", str(good), "--jobs", "0"]) == 1


def test_missing_inputs_exit_2():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = _write_config(tmp)
        assert run(["report", "--config", str(cfg)]) == 2
        assert run(["observe", "--config", str(cfg)]) == 2
        assert run(["assimilate", "--config", str(cfg)]) == 2


def _report(tmp: Path) -> Path:
    out = tmp / "out"
    out.mkdir()
    for path in (DATA / "sample_records").glob("*.csv"):
        shutil.copy(path, out / path.name)
    cfg = tmp / "run.toml"
    cfg.write_text(tomli_w.dumps({"output_dir": str(out)}))
    assert run(["report", "--config", str(cfg)]) == 0
    return out


def test_report_matches_golden_tables():
    with tempfile.TemporaryDirectory() as tmp:
        out = _report(Path(tmp))
        for golden in sorted((DATA / "golden").glob("*.csv")):
            assert (out / golden.name).read_bytes() == golden.read_bytes(), golden.name

        manifest = read_manifest(out)
        assert sorted(manifest.outputs) == [
            "forecast_lead_windows.csv",
            "rmse_vs_cycle.svg",
            "rmse_vs_lead.svg",
            "running_mean.csv",
            "summary_cycles.csv",
            "summary_forecast.csv",
        ]
        assert "cycles_SC_rep001.csv" in manifest.inputs


def test_report_svgs_are_deterministic():
    with tempfile.TemporaryDirectory() as tmp:
        out = _report(Path(tmp))
        first = {name: (out / name).read_bytes() for name in ("rmse_vs_cycle.svg", "rmse_vs_lead.svg")}
        assert all(blob.startswith(b"<?xml") for blob in first.values())

        cfg = Path(tmp) / "run.toml"
        assert run(["report", "--config", str(cfg)]) == 0
        for name, blob in first.items():
            assert (out / name).read_bytes() == blob, name


def main():
    from _runner import run_tests
    return run_tests("COMMAND-LINE TESTS", [
        test_truth_writes_checkpoint_and_manifest,
        test_seed_override_changes_truth,
        test_zero_cycles_gives_header_only_tables,
        test_dataset_variant_runs_enough_cycles_for_training,
        test_frozen_forecasts_are_labelled,
        test_configuration_errors_exit_1,
        test_missing_inputs_exit_2,
        test_report_matches_golden_tables,
        test_report_svgs_are_deterministic,
    ])


if __name__ == "__main__":
    sys.exit(main())
