"""
Twin experiments.

A repetition generates a truth trajectory with the reference model,
simulates observations from it, runs cycled 4D-Var with the perturbed
model for one variant and launches forecasts from the analyses. The truth
is stored only at window boundaries; anything finer is regenerated with
the reference model from the preceding checkpoint.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from tqdm import tqdm

from pynn4dvar.config import RunConfig
from pynn4dvar.covariances_obs import (
    DAY,
    HOUR,
    Covariances,
    ObservationOperator,
    ObsNetwork,
    WindowObservations,
    simulate_observations,
)
from pynn4dvar.exceptions import DataError, DivergenceError, NumericalError, WindowError
from pynn4dvar.fourdvar import AnalysisResult, Background, FourDVar, Variant
from pynn4dvar.neural_net import ColumnCorrector
from pynn4dvar.qg_dynamics import QGModel, QGState, jet_initial_condition, rmse

logger = logging.getLogger(__name__)

CYCLE_HEADER = ("cycle", "fg_rmse", "an_rmse", "cost_total", "inner_iters")
FORECAST_HEADER = ("launch_cycle", "lead_hours", "rmse")
MINIMIZER_HEADER = (
    "cycle", "outer", "inner_iterations", "cost_total", "cost_background", "cost_model",
    "cost_observation", "gradient_norm", "negative_curvature",
)
RUNNING_WINDOW = 32


def _steps_per(model: QGModel, seconds: float) -> int:
    return model.n_steps(0.0, seconds)


# -- truth ----------------------------------------------------------------


def run_truth(
    model: QGModel,
    seed: int,
    days: int,
    relaxation_days: int = 64,
    perturbation_std: float = 1.0e-2,
    progress: bool = False,
) -> list[QGState]:
    """
    Truth trajectory checkpointed once per day.

    Jet initial condition, a first relaxation run, a seeded Gaussian
    perturbation of interior-row ψ, a second relaxation run, then `days` days of truth.
    The returned states have valid times 0, 1 day, ..., `days` days.

    Raises:
        DivergenceError: If the trajectory becomes non-finite (stamp is the day)
    """
    state = jet_initial_condition(model, seed)
    rng = np.random.default_rng(seed)
    for leg in range(2):
        if leg == 1:
            psi = state.psi.copy()
            psi[:, 1:-1, :] += perturbation_std * rng.standard_normal(psi[:, 1:-1, :].shape)
            state = state.with_psi(psi)
        for day in range(relaxation_days):
            state = _advance_day(model, state, day)
        logger.debug("Relaxation run %d finished", leg + 1)

    state = QGState(state.psi, 0.0)
    checkpoints = [state]
    for day in tqdm(range(days), desc="truth", disable=not progress):
        state = _advance_day(model, state, day)
        checkpoints.append(state)
    return checkpoints


def _advance_day(model: QGModel, state: QGState, day: int) -> QGState:
    try:
        state, _ = model.resolvent(state, state.valid_time + DAY, record=False)
    except NumericalError as e:
        raise DivergenceError(f"Truth run blew up: {e}", stamp=day) from e
    if not np.all(np.isfinite(state.psi)):
        raise DivergenceError("Truth run produced non-finite values", stamp=day)
    return state


class TruthTimeline:
    """
    Hourly truth regenerated on demand from daily checkpoints.

    At most `cache_days` days of hourly states are kept, least recently
    used first out.
    """

    def __init__(self, model: QGModel, checkpoints: Sequence[QGState], cache_days: int = 64):
        if cache_days < 1:
            raise ValueError(f"cache_days must be positive, got {cache_days}")
        self.model = model
        self.checkpoints = list(checkpoints)
        self.cache_days = cache_days
        self._hourly: OrderedDict[int, list[np.ndarray]] = OrderedDict()

    @property
    def days(self) -> int:
        return len(self.checkpoints) - 1

    def day_hours(self, day: int) -> list[np.ndarray]:
        """ψ at hours 0, 1, ..., 23 of a day."""
        if not 0 <= day < self.days:
            raise WindowError(f"Truth does not cover day {day} (has {self.days} days)")
        if day in self._hourly:
            self._hourly.move_to_end(day)
            return self._hourly[day]
        every = _steps_per(self.model, HOUR)
        states = self.model.trajectory(None, self.checkpoints[day], _steps_per(self.model, DAY), every)
        hours = [s.psi for s in states[:24]]
        self._hourly[day] = hours
        while len(self._hourly) > self.cache_days:
            self._hourly.popitem(last=False)
        return hours

    def at_times(self, day: int, offsets: Sequence[float]) -> list[QGState]:
        """Truth states at offsets (seconds, multiples of the truth step) within a day."""
        start = self.checkpoints[day]
        out = []
        state = start
        for offset in offsets:
            state, _ = self.model.resolvent(state, start.valid_time + offset, record=False)
            out.append(state)
        return out


def generate_observations(
    timeline: TruthTimeline, operator: ObservationOperator, seed: int, error_std: float, n_windows: int,
) -> list[WindowObservations]:
    """One observation window per truth day, each with its own derived seed."""
    if n_windows > timeline.days:
        raise WindowError(f"Truth covers {timeline.days} windows, {n_windows} requested")
    windows = []
    for day in range(n_windows):
        truth = timeline.at_times(day, operator.network.offsets)
        window_seed = int(np.random.SeedSequence([seed, day]).generate_state(1)[0])
        windows.append(simulate_observations(truth, operator, window_seed, error_std, day * DAY))
    return windows


# -- plan -----------------------------------------------------------------


@dataclass
class ExperimentPlan:
    """One variant of a run configuration, with the objects built from it."""
    config: RunConfig
    variant: Variant

    @cached_property
    def reference_model(self) -> QGModel:
        return QGModel(self.config.model.reference)

    @cached_property
    def perturbed_model(self) -> QGModel:
        return QGModel(self.config.model.perturbed)

    @cached_property
    def network(self) -> ObsNetwork:
        path = self.config.observations.network
        return ObsNetwork.from_csv() if path is None else ObsNetwork.from_csv(path)

    @cached_property
    def operator(self) -> ObservationOperator:
        cfg = self.config.model.perturbed
        return ObservationOperator(self.network, cfg.nx, cfg.ny)

    @cached_property
    def covariances(self) -> Covariances:
        cfg = self.config.model.perturbed
        return Covariances.build(self.config.covariance, cfg.nx, cfg.ny, self.config.training.net.n_params)

    @cached_property
    def assimilator(self) -> FourDVar:
        return FourDVar(self.perturbed_model, self.operator, self.config.covariance.r, self.config.minimizer)

    def truth_seed(self, rep: int) -> int:
        return self.config.seed + rep

    def net_index(self, rep: int) -> int:
        """Trained net used by a repetition; repetitions are spread evenly over the nets."""
        n_nets = self.config.training.n_nets
        return rep * n_nets // self.config.experiment.repetitions

    def first_background(self, truth0: QGState, rep: int, corrector: ColumnCorrector | None = None) -> Background:
        """
        Background of the first cycle: the truth plus a draw from B.

        The draw depends only on (seed, repetition), so the first background
        can be regenerated anywhere.
        """
        cov = self.covariances
        rng = np.random.default_rng([self.truth_seed(rep), 1])
        x0 = QGState(truth0.psi + cov.B.apply_sqrt(rng.standard_normal(truth0.psi.shape)), truth0.valid_time)
        variant = self.variant
        w = np.zeros(truth0.psi.shape) if variant.has_w else None
        p = None
        if variant.has_p:
            if corrector is None:
                raise DataError("NN variant needs initial weights")
            p = np.array(corrector.weights)
        return Background(variant, x0, cov, w=w, p=p, corrector=corrector)


# -- cycled DA ------------------------------------------------------------


@dataclass
class CycleRecord:
    cycle: int
    background: np.ndarray
    analysis: np.ndarray
    w: np.ndarray | None
    p: np.ndarray | None
    fg_rmse: float
    an_rmse: float
    result: AnalysisResult | None = None
    diverged: bool = False

    @property
    def cost_total(self) -> float:
        return float("nan") if self.result is None else self.result.report.total

    @property
    def inner_iters(self) -> int:
        if self.result is None:
            return 0
        return sum(h.inner_iterations for h in self.result.report.history)

    def table_row(self) -> tuple:
        return (self.cycle, self.fg_rmse, self.an_rmse, self.cost_total, self.inner_iters)

    def minimizer_rows(self) -> list[tuple]:
        if self.result is None:
            return []
        return [
            (self.cycle, h.outer, h.inner_iterations, h.cost_total, h.cost_background, h.cost_model,
             h.cost_observation, h.gradient_norm, h.negative_curvature)
            for h in self.result.report.history
        ]


def window_rmse(model: QGModel, w: np.ndarray | None, x0: QGState, truth_hours: Sequence[np.ndarray]) -> float:
    """RMSE of a forced model trajectory against the hourly truth, averaged over the window."""
    states = model.trajectory(w, x0, _steps_per(model, DAY), _steps_per(model, HOUR))
    return float(np.mean([rmse(s.psi, t) for s, t in zip(states, truth_hours)]))


def run_cycled_da(
    plan: ExperimentPlan,
    timeline: TruthTimeline,
    observations: Sequence[WindowObservations],
    background: Background,
    n_cycles: int,
    progress: bool = False,
) -> list[CycleRecord]:
    """
    Cycled assimilation; one record per cycle.

    A cycle whose RMSE exceeds divergence_factor × r, or whose
    minimization fails numerically, ends the run with a flagged record.
    """
    if len(observations) < n_cycles:
        raise WindowError(f"Observations cover {len(observations)} cycles, {n_cycles} requested")
    fdv = plan.assimilator
    model = plan.perturbed_model
    limit = plan.config.experiment.divergence_factor * plan.config.covariance.r
    records = []
    for cycle in tqdm(range(n_cycles), desc=plan.variant.value, disable=not progress):
        truth_hours = timeline.day_hours(cycle)
        try:
            fg = window_rmse(model, fdv.forcing(background.control, background), background.x0, truth_hours)
            result = fdv.outer_loop(background, observations[cycle])
            an_control = result.analysis
            an = window_rmse(model, fdv.forcing(an_control, background), QGState(an_control.x0, background.t0),
                             truth_hours)
        except NumericalError as e:
            logger.warning("Cycle %d diverged: %s", cycle, e)
            records.append(CycleRecord(cycle, background.x0.psi, background.x0.psi, None, None,
                                       float("nan"), float("nan"), diverged=True))
            break

        record = CycleRecord(cycle, background.x0.psi, an_control.x0, an_control.w, an_control.p, fg, an, result)
        if not (fg <= limit and an <= limit):
            logger.warning("Cycle %d diverged: first-guess RMSE %.3e, analysis RMSE %.3e", cycle, fg, an)
            record.diverged = True
            records.append(record)
            break
        records.append(record)
        logger.info("cycle %d: first-guess RMSE %.4f, analysis RMSE %.4f", cycle, fg, an)
        background = fdv.cycle(an_control, background)
    return records


# -- forecasts ------------------------------------------------------------


@dataclass
class ForecastRecord:
    launch_cycle: int
    rmse: np.ndarray  # hourly, lead 0 included

    def table_rows(self) -> list[tuple]:
        return [(self.launch_cycle, lead, float(v)) for lead, v in enumerate(self.rmse)]


def forecast_errors(
    fdv: FourDVar,
    background: Background,
    record: CycleRecord,
    timeline: TruthTimeline,
    days: int,
    policy: str,
) -> ForecastRecord:
    """
    Forecast from an analysis with hourly RMSE against the truth.

    WC keeps its analysed forcing; corrected variants evaluate the network
    at the launch state and either refresh it every day (`daily`) or keep
    it (`frozen`).
    """
    model = fdv.model
    variant = background.variant
    launch = record.cycle
    state = QGState(record.analysis, launch * DAY)
    corrector = None
    if variant.uses_corrector:
        corrector = background.corrector.with_weights(record.p) if variant.has_p else background.corrector
    w = record.w if variant.has_w else None
    if corrector is not None:
        w = corrector.apply(state.psi)

    per_day = _steps_per(model, DAY)
    every = _steps_per(model, HOUR)
    errors = []
    for day in range(days):
        if corrector is not None and policy == "daily" and day > 0:
            w = corrector.apply(state.psi)
        states = model.trajectory(w, state, per_day, every)
        truth_hours = timeline.day_hours(launch + day)
        errors.extend(rmse(s.psi, t) for s, t in zip(states[:24], truth_hours))
        state = states[-1]
    end = launch + days
    errors.append(rmse(state.psi, timeline.checkpoints[end].psi))
    return ForecastRecord(launch, np.array(errors))


def run_forecast_suite(
    plan: ExperimentPlan,
    records: Sequence[CycleRecord],
    timeline: TruthTimeline,
    background: Background,
) -> list[ForecastRecord]:
    """Forecasts from kept analyses, every `forecast_stride` cycles, up to `forecast_launches` launches."""
    exp = plan.config.experiment
    launches = [
        r for r in records
        if r.cycle >= exp.spin_up_cycles and not r.diverged
        and (r.cycle - exp.spin_up_cycles) % exp.forecast_stride == 0
    ][:exp.forecast_launches]
    out = []
    for record in launches:
        if record.cycle + exp.forecast_days > timeline.days:
            logger.warning("Truth too short for a forecast from cycle %d", record.cycle)
            break
        out.append(forecast_errors(
            plan.assimilator, background, record, timeline, exp.forecast_days, exp.correction_policy,
        ))
    return out


# -- whole repetition -----------------------------------------------------


@dataclass
class RepetitionResult:
    rep: int
    truth: list[QGState]
    observations: list[WindowObservations]
    records: list[CycleRecord]
    forecasts: list[ForecastRecord] = field(default_factory=list)


def run_repetition(plan: ExperimentPlan, rep: int, corrector: ColumnCorrector | None = None) -> RepetitionResult:
    """Truth, observations, cycled DA and forecasts for one repetition, in memory."""
    cfg = plan.config
    exp = cfg.experiment
    truth = run_truth(plan.reference_model, plan.truth_seed(rep), cfg.truth_days,
                      exp.relaxation_days, exp.perturbation_std)
    timeline = TruthTimeline(plan.reference_model, truth, exp.forecast_days + 1)
    observations = generate_observations(timeline, plan.operator, plan.truth_seed(rep), cfg.covariance.r,
                                         min(exp.total_cycles, timeline.days))
    background = plan.first_background(truth[0], rep, corrector)
    records = run_cycled_da(plan, timeline, observations, background, exp.total_cycles)
    forecasts = run_forecast_suite(plan, records, timeline, background) if exp.forecast_days else []
    return RepetitionResult(rep, truth, observations, records, forecasts)


# -- aggregation ----------------------------------------------------------


def running_mean(values: Sequence[float], window: int = RUNNING_WINDOW) -> np.ndarray:
    """Trailing mean over the last `window` values (fewer at the start)."""
    values = np.asarray(values, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if len(values) == 0:
        raise DataError("Cannot aggregate an empty set of values")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=0))


def summarize_cycles(
    tables: dict[str, Sequence[Sequence[dict]]], spin_up: int = 0,
) -> list[tuple]:
    """
    Time-averaged first-guess and analysis RMSE per variant: mean and std over repetitions.

    Args:
        tables: variant → one list of cycle-table rows per repetition
        spin_up: Cycles below this index are excluded
    """
    if not tables:
        raise DataError("No cycle records to aggregate")
    rows = []
    for variant, reps in tables.items():
        fg, an = [], []
        for rep in reps:
            kept = [r for r in rep if int(r["cycle"]) >= spin_up]
            if not kept:
                continue
            fg.append(np.mean([float(r["fg_rmse"]) for r in kept]))
            an.append(np.mean([float(r["an_rmse"]) for r in kept]))
        if not fg:
            continue
        fg_mean, fg_std = mean_std(fg)
        an_mean, an_std = mean_std(an)
        rows.append((variant, len(fg), fg_mean, fg_std, an_mean, an_std))
    return rows


def summarize_forecasts(tables: dict[str, Sequence[Sequence[dict]]]) -> list[tuple]:
    """Per variant and lead: mean over launches within a repetition, then mean and std over repetitions."""
    rows = []
    for variant, reps in tables.items():
        per_rep: dict[int, list[float]] = {}
        for rep in reps:
            by_lead: dict[int, list[float]] = {}
            for r in rep:
                by_lead.setdefault(int(r["lead_hours"]), []).append(float(r["rmse"]))
            for lead, values in by_lead.items():
                per_rep.setdefault(lead, []).append(float(np.mean(values)))
        for lead in sorted(per_rep):
            mean, std = mean_std(per_rep[lead])
            rows.append((variant, lead, mean, std))
    return rows


def running_means(tables: dict[str, Sequence[Sequence[dict]]], window: int = RUNNING_WINDOW) -> list[tuple]:
    """Repetition-averaged RMSE per cycle and its trailing running mean."""
    rows = []
    for variant, reps in tables.items():
        by_cycle: dict[int, tuple[list[float], list[float]]] = {}
        for rep in reps:
            for r in rep:
                fg, an = by_cycle.setdefault(int(r["cycle"]), ([], []))
                fg.append(float(r["fg_rmse"]))
                an.append(float(r["an_rmse"]))
        cycles = sorted(by_cycle)
        fg_mean = [float(np.mean(by_cycle[c][0])) for c in cycles]
        an_mean = [float(np.mean(by_cycle[c][1])) for c in cycles]
        fg_run = running_mean(fg_mean, window)
        an_run = running_mean(an_mean, window)
        for k, c in enumerate(cycles):
            rows.append((variant, c, fg_mean[k], an_mean[k], float(fg_run[k]), float(an_run[k])))
    return rows


LEAD_WINDOWS = {"day0_1": (0, 24), "day1_2": (24, 48), "day8_10": (192, 240)}


def lead_window_means(rows: Sequence[dict]) -> list[tuple]:
    """Per launch: mean forecast RMSE over the day 0-1, day 1-2 and day 8-10 lead windows."""
    by_launch: dict[int, dict[int, float]] = {}
    for r in rows:
        by_launch.setdefault(int(r["launch_cycle"]), {})[int(r["lead_hours"])] = float(r["rmse"])
    out = []
    for launch in sorted(by_launch):
        series = by_launch[launch]
        means = []
        for lo, hi in LEAD_WINDOWS.values():
            vals = [series[h] for h in range(lo, hi) if h in series]
            means.append(float(np.mean(vals)) if vals else float("nan"))
        out.append((launch, *means))
    return out


def load_records_dir(directory: Path, prefix: str) -> dict[str, list[Path]]:
    """Files named `{prefix}_{variant}_rep{r:03d}.csv`, grouped by variant in repetition order."""
    groups: dict[str, list[Path]] = {}
    for path in sorted(directory.glob(f"{prefix}_*_rep*.csv")):
        variant = path.stem[len(prefix) + 1:].rsplit("_rep", 1)[0]
        groups.setdefault(variant, []).append(path)
    return groups
