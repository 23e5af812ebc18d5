#!/usr/bin/env python3
"""
Tests for the twin-experiment driver: truth generation, cycled
assimilation, forecasts and aggregation of result tables.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from pynn4dvar.config import parse_config
from pynn4dvar.covariances_obs import DAY, ObsNetwork
from pynn4dvar.exceptions import DataError, WindowError
from pynn4dvar.experiments import (
    ExperimentPlan,
    TruthTimeline,
    forecast_errors,
    generate_observations,
    lead_window_means,
    load_records_dir,
    mean_std,
    run_cycled_da,
    run_forecast_suite,
    run_truth,
    running_mean,
    running_means,
    summarize_cycles,
    summarize_forecasts,
)
from pynn4dvar.fourdvar import Background, Variant
from pynn4dvar.neural_net import zero_corrector
from pynn4dvar.qg_dynamics import QGConfig, QGModel, jet_initial_condition

GRID = {"nx": 12, "ny": 8}


def small_plan(tmp: str, variant: Variant = Variant.SC, covariance: dict | None = None, **experiment) -> ExperimentPlan:
    """Plan on a 12×8 grid in which the assimilating model equals the truth model."""
    network = ObsNetwork.quasi_random(12, 8, 10).to_csv(Path(tmp) / "network.csv")
    cfg = parse_config({
        "seed": 3,
        "output_dir": tmp,
        "model": {"reference": GRID, "perturbed": GRID},
        "observations": {"network": str(network)},
        "covariance": covariance or {},
        "experiment": {"relaxation_days": 0, "repetitions": 4, **experiment},
        "training": {"n_nets": 2},
    })
    return ExperimentPlan(cfg, variant)


def test_truth_without_days():
    model = QGModel(QGConfig.reference(**GRID))
    truth = run_truth(model, seed=0, days=0, relaxation_days=0)
    assert len(truth) == 1
    assert truth[0].valid_time == 0.0


def test_truth_is_seeded():
    model = QGModel(QGConfig.reference(**GRID))
    a = run_truth(model, seed=1, days=1, relaxation_days=1)
    b = run_truth(model, seed=1, days=1, relaxation_days=1)
    c = run_truth(model, seed=2, days=1, relaxation_days=1)
    assert [s.valid_time for s in a] == [0.0, DAY]
    assert all(np.array_equal(x.psi, y.psi) for x, y in zip(a, b))
    assert not np.array_equal(a[1].psi, c[1].psi)


def test_truth_perturbation_keeps_walls():
    model = QGModel(QGConfig.reference(**GRID))
    jet = jet_initial_condition(model, seed=5)
    for relaxation in (0, 1):
        truth = run_truth(model, seed=5, days=1, relaxation_days=relaxation)
        for state in truth:
            assert np.array_equal(state.psi[:, [0, -1], :], jet.psi[:, [0, -1], :])
    perturbed = run_truth(model, seed=5, days=0, relaxation_days=0)[0]
    assert not np.allclose(perturbed.psi[:, 1:-1, :], jet.psi[:, 1:-1, :])


def test_timeline_regenerates_hours():
    model = QGModel(QGConfig.reference(**GRID))
    truth = run_truth(model, seed=4, days=1, relaxation_days=0)
    timeline = TruthTimeline(model, truth)
    hours = timeline.day_hours(0)
    assert len(hours) == 24
    assert np.array_equal(hours[0], truth[0].psi)
    three, _ = model.resolvent(truth[0], 3 * 3600.0, record=False)
    assert np.array_equal(hours[3], three.psi)
    assert np.array_equal(timeline.at_times(0, [3 * 3600.0])[0].psi, three.psi)
    with pytest.raises(WindowError):
        timeline.day_hours(1)


def test_observation_windows():
    with tempfile.TemporaryDirectory() as tmp:
        plan = small_plan(tmp)
        truth = run_truth(plan.reference_model, seed=5, days=2, relaxation_days=0)
        timeline = TruthTimeline(plan.reference_model, truth)
        windows = generate_observations(timeline, plan.operator, 5, 0.2, 2)
        again = generate_observations(timeline, plan.operator, 5, 0.2, 2)
        assert [w.window_start for w in windows] == [0.0, DAY]
        assert all(len(w.batches) == 12 for w in windows)
        assert np.array_equal(windows[1].batches[0].values, again[1].batches[0].values)
        with pytest.raises(WindowError):
            generate_observations(timeline, plan.operator, 5, 0.2, 3)


def test_plan_helpers():
    with tempfile.TemporaryDirectory() as tmp:
        plan = small_plan(tmp)
        assert [plan.net_index(r) for r in range(4)] == [0, 0, 1, 1]
        assert plan.truth_seed(2) == 5
        model = plan.reference_model
        truth0 = run_truth(model, seed=0, days=0, relaxation_days=0)[0]
        a = plan.first_background(truth0, 0)
        b = plan.first_background(truth0, 0)
        c = plan.first_background(truth0, 1)
        assert np.array_equal(a.x0.psi, b.x0.psi)
        assert not np.array_equal(a.x0.psi, c.x0.psi)
        assert a.w is None and a.p is None

        nn = ExperimentPlan(plan.config, Variant.NN)
        with pytest.raises(DataError):
            nn.first_background(truth0, 0)
        bg = nn.first_background(truth0, 0, zero_corrector(12, 8))
        assert np.array_equal(bg.p, np.zeros(386))


def test_perfect_twin_has_zero_error():
    with tempfile.TemporaryDirectory() as tmp:
        plan = small_plan(tmp, forecast_days=1, forecast_launches=1)
        truth = run_truth(plan.reference_model, seed=6, days=2, relaxation_days=0)
        timeline = TruthTimeline(plan.reference_model, truth)
        observations = generate_observations(timeline, plan.operator, 6, 0.0, 2)
        background = Background(Variant.SC, truth[0], plan.covariances)
        records = run_cycled_da(plan, timeline, observations, background, 2)
        assert [r.cycle for r in records] == [0, 1]
        for r in records:
            assert r.fg_rmse == 0.0
            assert r.an_rmse == 0.0
            assert not r.diverged
            assert r.inner_iters == 0
            assert len(r.minimizer_rows()) == 2
        forecasts = run_forecast_suite(plan, records, timeline, background)
        assert len(forecasts) == 1
        assert forecasts[0].rmse.shape == (25,)
        assert np.all(forecasts[0].rmse == 0.0)


def test_imperfect_background_is_corrected():
    with tempfile.TemporaryDirectory() as tmp:
        plan = small_plan(tmp, covariance={"b": 0.1})
        truth = run_truth(plan.reference_model, seed=7, days=1, relaxation_days=0)
        timeline = TruthTimeline(plan.reference_model, truth)
        observations = generate_observations(timeline, plan.operator, 7, 0.0, 1)
        background = plan.first_background(truth[0], 0)
        records = run_cycled_da(plan, timeline, observations, background, 1)
        assert records[0].fg_rmse > 0.0
        assert records[0].an_rmse < records[0].fg_rmse
        assert records[0].table_row()[0] == 0

        forecast = forecast_errors(plan.assimilator, background, records[0], timeline, 1, "daily")
        assert forecast.rmse.shape == (25,)
        analysis_error = np.sqrt(np.mean((records[0].analysis - truth[0].psi) ** 2))
        assert forecast.rmse[0] == pytest.approx(analysis_error, rel=1e-14)
        assert forecast.table_rows()[3] == (0, 3, float(forecast.rmse[3]))


def test_divergence_stops_the_run():
    with tempfile.TemporaryDirectory() as tmp:
        plan = small_plan(tmp, divergence_factor=1e-9)
        truth = run_truth(plan.reference_model, seed=8, days=2, relaxation_days=0)
        timeline = TruthTimeline(plan.reference_model, truth)
        observations = generate_observations(timeline, plan.operator, 8, 0.2, 2)
        records = run_cycled_da(plan, timeline, observations, plan.first_background(truth[0], 0), 2)
        assert len(records) == 1
        assert records[0].diverged
        with pytest.raises(WindowError):
            run_cycled_da(plan, timeline, observations[:1], plan.first_background(truth[0], 0), 2)


def test_running_mean():
    assert np.array_equal(running_mean([1.0, 2.0, 3.0, 4.0], window=2), [1.0, 1.5, 2.5, 3.5])
    assert np.array_equal(running_mean([2.0, 4.0]), [2.0, 3.0])
    assert running_mean([]).size == 0


def test_mean_std():
    assert mean_std([0.25]) == (0.25, 0.0)
    assert mean_std([0.5, 0.5, 0.5]) == (0.5, 0.0)
    mean, std = mean_std([0.25, 0.5, 0.75])
    assert mean == 0.5
    assert std == pytest.approx(np.sqrt(1 / 24), abs=1e-15)
    with pytest.raises(DataError):
        mean_std([])


def cycle_rows(fg, an):
    return [{"cycle": str(k), "fg_rmse": str(f), "an_rmse": str(a)} for k, (f, a) in enumerate(zip(fg, an))]


def test_summaries():
    tables = {
        "SC": [cycle_rows([0.5, 0.25], [0.25, 0.125]), cycle_rows([0.75, 0.5], [0.25, 0.375])],
        "WC": [cycle_rows([0.25, 0.25], [0.125, 0.125])],
    }
    assert summarize_cycles(tables) == [
        ("SC", 2, 0.5, 0.125, 0.25, 0.0625),
        ("WC", 1, 0.25, 0.0, 0.125, 0.0),
    ]
    # spin-up removes the first cycle
    assert summarize_cycles(tables, spin_up=1)[1] == ("WC", 1, 0.25, 0.0, 0.125, 0.0)
    # no kept cycles at all
    assert summarize_cycles(tables, spin_up=2) == []
    with pytest.raises(DataError):
        summarize_cycles({})

    rows = running_means(tables)
    assert rows[:2] == [("SC", 0, 0.625, 0.25, 0.625, 0.25), ("SC", 1, 0.375, 0.25, 0.5, 0.25)]


def forecast_rows(launch, values):
    return [{"launch_cycle": str(launch), "lead_hours": str(h), "rmse": str(v)} for h, v in enumerate(values)]


def test_forecast_summaries():
    rep = forecast_rows(0, [0.125, 0.25, 0.375]) + forecast_rows(1, [0.375, 0.5, 0.625])
    assert summarize_forecasts({"SC": [rep]}) == [("SC", 0, 0.25, 0.0), ("SC", 1, 0.375, 0.0), ("SC", 2, 0.5, 0.0)]
    windows = lead_window_means(rep)
    assert windows[0][:2] == (0, 0.25)
    assert windows[1][:2] == (1, 0.5)
    assert np.isnan(windows[0][2]) and np.isnan(windows[0][3])


def test_records_directory_grouping():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        for name in ("cycles_SC_rep001.csv", "cycles_SC_rep000.csv", "cycles_SC-NNa_rep000.csv", "other.csv"):
            (root / name).write_text("")
        groups = load_records_dir(root, "cycles")
    assert list(groups) == ["SC-NNa", "SC"]
    assert [p.name for p in groups["SC"]] == ["cycles_SC_rep000.csv", "cycles_SC_rep001.csv"]

def test_timeline_cache_is_bounded():
    model = QGModel(QGConfig.reference(**GRID))
    truth = run_truth(model, seed=6, days=3, relaxation_days=0)
    timeline = TruthTimeline(model, truth, cache_days=2)
    first = timeline.day_hours(0)
    timeline.day_hours(1)
    timeline.day_hours(2)
    assert list(timeline._hourly) == [1, 2]
    timeline.day_hours(1)
    again = timeline.day_hours(0)
    assert list(timeline._hourly) == [1, 0]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    with pytest.raises(ValueError):
        TruthTimeline(model, truth, cache_days=0)


def main():
    from _runner import run_tests
    return run_tests("EXPERIMENT TESTS", [
        test_truth_without_days,
        test_truth_is_seeded,
        test_truth_perturbation_keeps_walls,
        test_timeline_regenerates_hours,
        test_timeline_cache_is_bounded,
        test_observation_windows,
        test_plan_helpers,
        test_perfect_twin_has_zero_error,
        test_imperfect_background_is_corrected,
        test_divergence_stops_the_run,
        test_running_mean,
        test_mean_std,
        test_summaries,
        test_forecast_summaries,
        test_records_directory_grouping,
    ])


if __name__ == "__main__":
    sys.exit(main())
