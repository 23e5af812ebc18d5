"""
Command-line front end.

    pynn4dvar truth          --config run.toml
    pynn4dvar observe        --config run.toml
    pynn4dvar assimilate     --config run.toml [--jobs N]
    pynn4dvar train-offline  --config run.toml [--jobs N]
    pynn4dvar run-online     --config run.toml [--jobs N]
    pynn4dvar forecast       --config run.toml [--jobs N]
    pynn4dvar report         --config run.toml

Every command reads its inputs from and writes its outputs to the
configured output directory, and finishes by writing manifest.cbor.
Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import dask
import numpy as np
from dask import delayed
from distributed import Client, LocalCluster

from pynn4dvar.config import RunConfig, config_sha256, load_config
from pynn4dvar.covariances_obs import DAY, read_observations, write_observations
from pynn4dvar.exceptions import ConfigError, DataError, NN4DVarError, NumericalError
from pynn4dvar.experiments import (
    CYCLE_HEADER,
    FORECAST_HEADER,
    MINIMIZER_HEADER,
    CycleRecord,
    ExperimentPlan,
    TruthTimeline,
    generate_observations,
    lead_window_means,
    load_records_dir,
    run_cycled_da,
    run_forecast_suite,
    run_truth,
    running_means,
    summarize_cycles,
    summarize_forecasts,
)
from pynn4dvar.fourdvar import Variant
from pynn4dvar.manifest import Manifest
from pynn4dvar.neural_net import ColumnCorrector
from pynn4dvar.offline_training import (
    IncrementRecord,
    build_dataset,
    evaluate_normalized_mse,
    model_error_pairs,
    scaling_factor,
    train_corrector,
    truth_records,
    write_history,
)
from pynn4dvar.plotting import plot_rmse_vs_cycle, plot_rmse_vs_lead
from pynn4dvar.qg_dynamics import QGState
from pynn4dvar.serialization import (
    Checkpoint,
    read_checkpoint,
    read_table,
    write_checkpoint,
    write_table,
)

logger = logging.getLogger(__name__)

TEST_MSE_HEADER = ("source", "net", "n_pairs", "seed", "normalized_mse")
SUMMARY_CYCLES_HEADER = ("variant", "repetitions", "fg_rmse_mean", "fg_rmse_std", "an_rmse_mean", "an_rmse_std")
SUMMARY_FORECAST_HEADER = ("variant", "lead_hours", "rmse_mean", "rmse_std")
RUNNING_MEAN_HEADER = ("variant", "cycle", "fg_rmse", "an_rmse", "fg_running", "an_running")
LEAD_WINDOWS_HEADER = ("variant", "repetition", "launch_cycle", "day0_1", "day1_2", "day8_10")

TRAINING_SOURCES = {Variant.SC_NNT: "truth", Variant.SC_NNA: "analysis", Variant.NN: "analysis"}


# -- file names -------------------------------------------------------------


def truth_path(out: Path, rep: int) -> Path:
    return out / f"truth_rep{rep:03d}.ckpt"


def obs_path(out: Path, rep: int) -> Path:
    return out / f"obs_rep{rep:03d}.csv"


def variant_path(out: Path, kind: str, variant: Variant, rep: int, suffix: str) -> Path:
    return out / f"{kind}_{variant.value}_rep{rep:03d}.{suffix}"


def forecast_path(out: Path, variant: Variant, rep: int, policy: str) -> Path:
    """Frozen-policy forecasts of corrected variants are labelled `{variant}-frozen`."""
    label = f"{variant.value}-frozen" if policy == "frozen" and variant.uses_corrector else variant.value
    return out / f"forecast_{label}_rep{rep:03d}.csv"


def weights_path(directory: Path, source: str, k: int) -> Path:
    return directory / f"weights_{source}_{k:02d}.ckpt"


def history_path(out: Path, source: str, k: int) -> Path:
    return out / f"history_{source}_{k:02d}.csv"


# -- artifact I/O -----------------------------------------------------------


def save_truth(path: Path, states: Sequence[QGState], seed: int) -> Path:
    data = np.stack([s.psi for s in states])
    return write_checkpoint(path, Checkpoint("truth", data, 0.0, {"seed": str(seed), "days": str(len(states) - 1)}))


def load_truth(path: Path) -> list[QGState]:
    ckpt = read_checkpoint(path)
    if ckpt.data.ndim != 4:
        raise DataError(f"Truth payload has shape {ckpt.data.shape}", str(path))
    return [QGState(psi.copy(), k * DAY) for k, psi in enumerate(ckpt.data)]


def save_records(
    out: Path, variant: Variant, rep: int, records: Sequence[CycleRecord], spin_up: int, total: int | None = None,
) -> list[Path]:
    """
    Cycle table, stacked states, controls (WC/NN) and the minimizer log of one run.

    A diverged cycle stays in the minimizer log only. Cycles from `total`
    on (extra dataset cycles) are kept in the states but not in the table.
    """
    total = len(records) if total is None else total
    good = [r for r in records if not r.diverged]
    written = [
        write_table(variant_path(out, "cycles", variant, rep, "csv"), CYCLE_HEADER,
                    [r.table_row() for r in good if spin_up <= r.cycle < total]),
        write_table(variant_path(out, "minimizer", variant, rep, "csv"), MINIMIZER_HEADER,
                    [row for r in records for row in r.minimizer_rows()]),
    ]
    if good:
        states = np.stack([np.stack([r.background, r.analysis]) for r in good])
        written.append(write_checkpoint(
            variant_path(out, "states", variant, rep, "ckpt"), Checkpoint("states", states, 0.0),
        ))
        if variant.has_w or variant.has_p:
            controls = np.stack([r.w if variant.has_w else r.p for r in good])
            written.append(write_checkpoint(
                variant_path(out, "controls", variant, rep, "ckpt"), Checkpoint("controls", controls, 0.0),
            ))
    return written


def load_records(out: Path, variant: Variant, rep: int) -> list[CycleRecord]:
    states = read_checkpoint(variant_path(out, "states", variant, rep, "ckpt")).data
    controls = None
    if variant.has_w or variant.has_p:
        controls = read_checkpoint(variant_path(out, "controls", variant, rep, "ckpt")).data
    records = []
    for k, pair in enumerate(states):
        w = controls[k] if variant.has_w else None
        p = controls[k] if variant.has_p else None
        records.append(CycleRecord(k, pair[0], pair[1], w, p, float("nan"), float("nan")))
    return records


def load_corrector(cfg: RunConfig, plan: ExperimentPlan, rep: int) -> ColumnCorrector | None:
    if not plan.variant.uses_corrector:
        return None
    path = weights_path(cfg.weights_dir, TRAINING_SOURCES[plan.variant], plan.net_index(rep))
    return ColumnCorrector.from_checkpoint(read_checkpoint(path))


# -- jobs -------------------------------------------------------------------


def run_jobs(tasks: list, jobs: int) -> list:
    """Evaluate delayed tasks, on a local cluster when more than one job is allowed."""
    if not tasks:
        return []
    if jobs > 1:
        with LocalCluster(n_workers=jobs, threads_per_worker=1, processes=True) as cluster, Client(cluster):
            return list(dask.compute(*tasks))
    return list(dask.compute(*tasks, scheduler="synchronous"))


def job_truth(cfg: RunConfig, rep: int, progress: bool) -> list[Path]:
    plan = ExperimentPlan(cfg, Variant.SC)
    exp = cfg.experiment
    seed = plan.truth_seed(rep)
    states = run_truth(plan.reference_model, seed, cfg.truth_days, exp.relaxation_days, exp.perturbation_std,
                       progress=progress)
    return [save_truth(truth_path(cfg.output_dir, rep), states, seed)]


def job_observe(cfg: RunConfig, rep: int) -> list[Path]:
    plan = ExperimentPlan(cfg, Variant.SC)
    truth = load_truth(truth_path(cfg.output_dir, rep))
    timeline = TruthTimeline(plan.reference_model, truth)
    needed = max(cfg.experiment.total_cycles, cfg.dataset_cycles)
    windows = generate_observations(timeline, plan.operator, plan.truth_seed(rep), cfg.covariance.r,
                                    min(needed, timeline.days))
    return [write_observations(obs_path(cfg.output_dir, rep), windows, plan.network, cfg.observations.epoch)]


def job_assimilate(cfg: RunConfig, variant: Variant, rep: int, progress: bool) -> list[Path]:
    plan = ExperimentPlan(cfg, variant)
    out = cfg.output_dir
    truth = load_truth(truth_path(out, rep))
    observations = read_observations(obs_path(out, rep), plan.network, cfg.observations.epoch)
    windows = [observations[k * DAY] for k in range(len(observations)) if k * DAY in observations]
    timeline = TruthTimeline(plan.reference_model, truth)
    background = plan.first_background(truth[0], rep, load_corrector(cfg, plan, rep))
    records = run_cycled_da(plan, timeline, windows, background, cfg.cycles_for(variant), progress)
    exp = cfg.experiment
    return save_records(out, variant, rep, records, exp.spin_up_cycles, exp.total_cycles)


def job_forecast(cfg: RunConfig, variant: Variant, rep: int) -> list[Path]:
    plan = ExperimentPlan(cfg, variant)
    out = cfg.output_dir
    truth = load_truth(truth_path(out, rep))
    timeline = TruthTimeline(plan.reference_model, truth)
    background = plan.first_background(truth[0], rep, load_corrector(cfg, plan, rep))
    records = load_records(out, variant, rep)[:cfg.experiment.total_cycles]
    forecasts = run_forecast_suite(plan, records, timeline, background)
    rows = [row for f in forecasts for row in f.table_rows()]
    path = forecast_path(out, variant, rep, cfg.experiment.correction_policy)
    return [write_table(path, FORECAST_HEADER, rows)]


def _training_records(cfg: RunConfig, source: str, rep: int, n_pairs: int) -> list:
    out = cfg.output_dir
    if source == "analysis":
        plan_variant = cfg.training.dataset_variant
        return [
            IncrementRecord(r.cycle, r.background, r.analysis)
            for r in load_records(out, plan_variant, rep)
        ]
    plan = ExperimentPlan(cfg, Variant.SC)
    truth = load_truth(truth_path(out, rep))
    if len(truth) < n_pairs + 2:
        raise DataError(f"Truth has {len(truth)} checkpoints, {n_pairs + 2} needed", str(truth_path(out, rep)))
    return truth_records(truth[:n_pairs + 2], plan.perturbed_model, DAY)


def job_train(cfg: RunConfig, source: str, k: int, n_pairs: int, seed: int, test, save: bool) -> tuple:
    training = cfg.training
    rep = k % cfg.experiment.repetitions
    scaling = scaling_factor(cfg.model.perturbed.dt_seconds, DAY)
    dataset = build_dataset(_training_records(cfg, source, rep, n_pairs), n_pairs, scaling)
    corrector, history = train_corrector(dataset, training.net, training.adam.model_copy(update={"seed": seed}))
    score = evaluate_normalized_mse(corrector, test)
    written = []
    if save:
        written.append(write_checkpoint(weights_path(cfg.output_dir, source, k),
                                        corrector.to_checkpoint(source=source, seed=str(seed))))
        written.append(write_history(history_path(cfg.output_dir, source, k), history))
    logger.info("%s net %d (N=%d, seed %d): normalized test MSE %.4f", source, k, n_pairs, seed, score)
    return (source, k, n_pairs, seed, score), written


# -- commands ---------------------------------------------------------------


def _reps(cfg: RunConfig) -> range:
    return range(cfg.experiment.repetitions)


def cmd_truth(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    tasks = [delayed(job_truth)(cfg, rep, progress) for rep in _reps(cfg)]
    for paths in run_jobs(tasks, jobs):
        for p in paths:
            manifest.add_output(p)


def cmd_observe(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    for rep in _reps(cfg):
        manifest.add_input(truth_path(cfg.output_dir, rep))
    tasks = [delayed(job_observe)(cfg, rep) for rep in _reps(cfg)]
    for paths in run_jobs(tasks, jobs):
        for p in paths:
            manifest.add_output(p)


def _assimilate(cfg: RunConfig, variants: Sequence[Variant], manifest: Manifest, jobs: int, progress: bool):
    for rep in _reps(cfg):
        manifest.add_input(truth_path(cfg.output_dir, rep))
        manifest.add_input(obs_path(cfg.output_dir, rep))
        for variant in variants:
            if variant.uses_corrector:
                plan = ExperimentPlan(cfg, variant)
                manifest.add_input(weights_path(cfg.weights_dir, TRAINING_SOURCES[variant], plan.net_index(rep)))
    tasks = [delayed(job_assimilate)(cfg, v, rep, progress) for v in variants for rep in _reps(cfg)]
    for paths in run_jobs(tasks, jobs):
        for p in paths:
            manifest.add_output(p)


def cmd_assimilate(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    _assimilate(cfg, cfg.experiment.variants, manifest, jobs, progress)


def cmd_run_online(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    _assimilate(cfg, [Variant.NN], manifest, jobs, progress)


def cmd_train_offline(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    training = cfg.training
    plan = ExperimentPlan(cfg, Variant.SC)
    exp = cfg.experiment
    test_truth = run_truth(plan.reference_model, cfg.seed + training.test_seed_offset, training.test_pairs,
                           exp.relaxation_days, exp.perturbation_std)
    test = model_error_pairs(test_truth, plan.perturbed_model, DAY)

    tasks = []
    for source in ("truth", "analysis"):
        for k in range(training.n_nets):
            tasks.append(delayed(job_train)(cfg, source, k, training.n_pairs, training.adam.seed + k, test, True))
        for n_pairs in training.learning_curve:
            for s in range(training.learning_curve_seeds):
                tasks.append(delayed(job_train)(cfg, source, s, n_pairs, training.adam.seed + s, test, False))
    for rep in range(min(training.n_nets, exp.repetitions)):
        manifest.add_input(truth_path(cfg.output_dir, rep))
        manifest.add_input(variant_path(cfg.output_dir, "states", training.dataset_variant, rep, "ckpt"))

    rows = []
    for row, paths in run_jobs(tasks, jobs):
        rows.append(row)
        for p in paths:
            manifest.add_output(p)
    manifest.add_output(write_table(cfg.output_dir / "offline_test_mse.csv", TEST_MSE_HEADER, rows))


def cmd_forecast(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    for rep in _reps(cfg):
        manifest.add_input(truth_path(cfg.output_dir, rep))
        for variant in cfg.experiment.variants:
            manifest.add_input(variant_path(cfg.output_dir, "states", variant, rep, "ckpt"))
    tasks = [delayed(job_forecast)(cfg, v, rep) for v in cfg.experiment.variants for rep in _reps(cfg)]
    for paths in run_jobs(tasks, jobs):
        for p in paths:
            manifest.add_output(p)


def _read_group(paths: Sequence[Path], header, manifest: Manifest) -> list[list[dict]]:
    tables = []
    for path in paths:
        manifest.add_input(path)
        tables.append(read_table(path, header))
    return tables


def cmd_report(cfg: RunConfig, manifest: Manifest, jobs: int, progress: bool) -> None:
    out = cfg.output_dir
    cycle_files = load_records_dir(out, "cycles")
    forecast_files = load_records_dir(out, "forecast")
    if not cycle_files and not forecast_files:
        raise DataError("No cycle or forecast tables to report on", str(out))

    cycles = {v: _read_group(paths, CYCLE_HEADER, manifest) for v, paths in cycle_files.items()}
    forecasts = {v: _read_group(paths, FORECAST_HEADER, manifest) for v, paths in forecast_files.items()}

    if cycles:
        summary = summarize_cycles(cycles, cfg.experiment.spin_up_cycles)
        running = running_means(cycles)
        manifest.add_output(write_table(out / "summary_cycles.csv", SUMMARY_CYCLES_HEADER, summary))
        manifest.add_output(write_table(out / "running_mean.csv", RUNNING_MEAN_HEADER, running))
        manifest.add_output(plot_rmse_vs_cycle(running, out / "rmse_vs_cycle.svg"))
    if forecasts:
        summary = summarize_forecasts(forecasts)
        windows = [
            (variant, rep, *row)
            for variant, reps in forecasts.items()
            for rep, table in enumerate(reps)
            for row in lead_window_means(table)
        ]
        manifest.add_output(write_table(out / "summary_forecast.csv", SUMMARY_FORECAST_HEADER, summary))
        manifest.add_output(write_table(out / "forecast_lead_windows.csv", LEAD_WINDOWS_HEADER, windows))
        manifest.add_output(plot_rmse_vs_lead(summary, out / "rmse_vs_lead.svg"))


COMMANDS: dict[str, Callable] = {
    "truth": cmd_truth,
    "observe": cmd_observe,
    "assimilate": cmd_assimilate,
    "train-offline": cmd_train_offline,
    "run-online": cmd_run_online,
    "forecast": cmd_forecast,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pynn4dvar", description="NN 4D-Var twin experiments on a QG model")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="TOML run configuration")
        p.add_argument("--jobs", type=int, default=1, help="parallel jobs (default 1)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--output", type=Path, default=None, help="override the output directory")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        p.add_argument("--progress", action="store_true", help="show progress bars")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("must be at least 1", "--jobs")
        cfg = load_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.output is not None:
            updates["output_dir"] = args.output
        if updates:
            cfg = cfg.model_copy(update=updates)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)

        manifest = Manifest(config_sha256(cfg))
        manifest.add_input(args.config)
        COMMANDS[args.command](cfg, manifest, args.jobs, args.progress)
        manifest.write(cfg.output_dir)
    except ConfigError as e:
        print(f"✗ configuration error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"✗ data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"✗ numerical failure: {e}", file=sys.stderr)
        return 3
    except NN4DVarError as e:
        print(f"✗ {e}", file=sys.stderr)
        return 2
    print(f"✓ {args.command}: {len(manifest.outputs)} output(s) in {cfg.output_dir}")
    return 0


def main() -> None:
    sys.exit(run())
