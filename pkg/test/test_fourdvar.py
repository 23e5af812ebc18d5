#!/usr/bin/env python3
"""
Tests for the 4D-Var cost functions, their gradients, the preconditioned
conjugate-gradient inner loop and the outer loop, on an 8×4 channel with a
two-hour window.
"""

import sys
from dataclasses import replace

import numpy as np
import pytest

from pynn4dvar.covariances_obs import (
    CovarianceConfig,
    Covariances,
    ObsNetwork,
    ObservationOperator,
    WindowObservations,
    simulate_observations,
)
from pynn4dvar.exceptions import ShapeError, WindowError
from pynn4dvar.fourdvar import (
    Background,
    ControlVector,
    FourDVar,
    MinimizerConfig,
    Variant,
)
from pynn4dvar.neural_net import ColumnCorrector, LayerSpec, NetSpec, Normalization
from pynn4dvar.qg_dynamics import QGConfig, QGModel, QGState, jet_initial_condition

NX, NY = 8, 4
WINDOW = 7200.0
NET = NetSpec(layers=(
    LayerSpec(n_in=4, n_out=3, activation="tanh"),
    LayerSpec(n_in=3, n_out=2, activation="linear"),
))


class Case:
    """A small assimilation problem with a known truth."""

    def __init__(self, seed=0, minimizer=None, cov_cfg=None, obs_error=0.2, bg_scale=1.0):
        self.model = QGModel(QGConfig.perturbed(nx=NX, ny=NY))
        network = replace(
            ObsNetwork.quasi_random(NX, NY, 10),
            interval_seconds=2400.0, first_offset_seconds=1200.0, window_seconds=WINDOW,
        )
        self.H = ObservationOperator(network, NX, NY)
        self.fdv = FourDVar(self.model, self.H, r=0.2, minimizer=minimizer, window_seconds=WINDOW)
        cov_cfg = cov_cfg or CovarianceConfig(spectral_floor=1e-3)
        self.cov = Covariances.build(cov_cfg, NX, NY, NET.n_params)
        self.rng = np.random.default_rng(seed)

        self.truth = jet_initial_condition(self.model, seed, noise=0.05)
        states = self.model.trajectory(None, self.truth, 5)
        self.obs = simulate_observations([states[1], states[3], states[5]], self.H, seed, obs_error)
        self.xb = self.truth.psi + bg_scale * self.cov.B.apply_sqrt(self.rng.standard_normal(self.model.shape))

        weights = 0.3 * self.rng.standard_normal(NET.n_params)
        norm = Normalization(np.zeros(4), np.ones(4), np.zeros(2), np.full(2, 1e-3))
        self.corrector = ColumnCorrector(NET, weights, norm, NX, NY)

    def background(self, variant: Variant, corrector=None) -> Background:
        corrector = corrector or (self.corrector if variant.uses_corrector else None)
        return Background(
            variant, QGState(self.xb, 0.0), self.cov,
            w=np.zeros(self.model.shape) if variant.has_w else None,
            p=corrector.weights.copy() if variant.has_p else None,
            corrector=corrector,
        )

    def random_direction(self, variant: Variant) -> ControlVector:
        """A direction in the range of the square-root covariances."""
        shape = self.model.shape
        return ControlVector(
            variant,
            self.cov.B.apply_sqrt(self.rng.standard_normal(shape)),
            self.cov.Q.apply_sqrt(self.rng.standard_normal(shape)) if variant.has_w else None,
            self.cov.P.apply_sqrt(self.rng.standard_normal(NET.n_params)) if variant.has_p else None,
        )


def test_perfect_data_has_zero_cost():
    case = Case(obs_error=0.0)
    bg = replace(case.background(Variant.SC), x0=case.truth)
    report = case.fdv.cost(bg.control, bg, case.obs)
    assert report.total == 0.0


def test_no_observations_leaves_background_term():
    case = Case(seed=1)
    bg = case.background(Variant.SC)
    x0 = case.truth.psi
    report = case.fdv.cost_sc(x0, bg, WindowObservations(0.0))
    assert report.observation == 0.0
    assert report.total == pytest.approx(0.5 * case.cov.B.norm2(x0 - case.xb), rel=1e-14)


def test_cost_terms_against_direct_evaluation():
    case = Case(seed=2)
    bg = case.background(Variant.SC)
    v = case.rng.standard_normal(case.model.shape)
    x0 = case.xb + case.cov.B.apply(v)
    report = case.fdv.cost_sc(x0, bg, case.obs)
    assert report.background == pytest.approx(0.5 * np.vdot(v, case.cov.B.apply(v)), rel=1e-8)

    jo = 0.0
    for batch in case.obs.batches:
        state, _ = case.model.resolvent(QGState(x0, 0.0), batch.time_offset, record=False)
        jo += 0.5 * np.sum((batch.values - case.H.apply(state.psi)) ** 2) / 0.2 ** 2
    assert report.observation == pytest.approx(jo, rel=1e-12)
    assert report.model == 0.0


def test_weak_constraint_with_zero_forcing_is_strong_constraint():
    case = Case(seed=3)
    bg = case.background(Variant.WC)
    x0 = case.truth.psi
    wc = case.fdv.cost_wc(np.zeros(case.model.shape), x0, bg, case.obs)
    sc = case.fdv.cost_sc(x0, bg, case.obs)
    assert wc.model == 0.0
    assert wc.total == pytest.approx(sc.total, rel=1e-12)


def test_zero_network_is_strong_constraint():
    case = Case(seed=4)
    zero = case.corrector.with_weights(np.zeros(NET.n_params))
    bg = case.background(Variant.NN, corrector=zero)
    x0 = case.truth.psi
    nn = case.fdv.cost_nn(np.zeros(NET.n_params), x0, bg, case.obs)
    sc = case.fdv.cost_sc(x0, bg, case.obs)
    assert nn.total == pytest.approx(sc.total, rel=1e-12)


def test_network_cost_is_weak_constraint_with_substituted_forcing():
    case = Case(seed=5)
    bg_nn = case.background(Variant.NN)
    bg_wc = case.background(Variant.WC)
    p = bg_nn.p + case.cov.P.apply_sqrt(case.rng.standard_normal(NET.n_params))
    x0 = case.truth.psi
    nn = case.fdv.cost_nn(p, x0, bg_nn, case.obs)
    w = case.corrector.with_weights(p).apply(x0)
    wc = case.fdv.cost_wc(w, x0, bg_wc, case.obs)
    assert nn.observation == pytest.approx(wc.observation, rel=1e-12)
    assert nn.background == pytest.approx(wc.background, rel=1e-12)
    assert nn.model == pytest.approx(0.5 * np.sum((p - bg_nn.p) ** 2) / 0.02 ** 2, rel=1e-12)


@pytest.mark.parametrize("variant", [Variant.SC, Variant.WC, Variant.SC_NNA, Variant.NN])
def test_incremental_gradient_matches_finite_differences(variant):
    case = Case(seed=6)
    bg = case.background(variant)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    delta = case.random_direction(variant)
    u = case.random_direction(variant)
    h = 1e-2
    plus = case.fdv.quadratic_cost(lin, delta + u.scaled(h))
    minus = case.fdv.quadratic_cost(lin, delta - u.scaled(h))
    expected = case.fdv.incremental_gradient(lin, delta).dot(u)
    assert (plus - minus) / (2 * h) == pytest.approx(expected, rel=1e-7)


def unit_directions(control: ControlVector):
    for name in ("x0", "w", "p"):
        block = getattr(control, name)
        if block is None:
            continue
        for index in np.ndindex(block.shape):
            e = control.zeros_like()
            getattr(e, name)[index] = 1.0
            yield e


@pytest.mark.parametrize("variant", [Variant.SC, Variant.WC, Variant.NN])
def test_incremental_gradient_per_component(variant):
    """Central differences of the quadratic cost, one control component at a time."""
    case = Case(seed=13)
    bg = case.background(variant)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    delta = case.random_direction(variant)
    gradient = case.fdv.incremental_gradient(lin, delta)
    analytic, numeric = [], []
    for e in unit_directions(delta):
        plus = case.fdv.quadratic_cost(lin, delta + e)
        minus = case.fdv.quadratic_cost(lin, delta - e)
        numeric.append(0.5 * (plus - minus))
        analytic.append(gradient.dot(e))
    analytic, numeric = np.array(analytic), np.array(numeric)
    sizes = {Variant.SC: 64, Variant.WC: 128, Variant.NN: 64 + NET.n_params}
    assert analytic.size == sizes[variant]
    error = np.abs(numeric - analytic).max() / np.abs(analytic).max()
    assert error <= 1e-8, f"worst component error {error:.3e}"


def test_quadratic_cost_at_zero_is_first_guess_cost():
    case = Case(seed=7)
    bg = case.background(Variant.WC)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    assert case.fdv.quadratic_cost(lin, bg.control.zeros_like()) == pytest.approx(lin.cost.total, rel=1e-12)


@pytest.mark.parametrize("variant", [Variant.SC, Variant.WC, Variant.SC_NNT, Variant.NN])
def test_nonlinear_gradient_taylor(variant):
    case = Case(seed=8)
    bg = case.background(variant)
    control = bg.control + case.random_direction(variant).scaled(0.5)
    base = case.fdv.cost(control, bg, case.obs).total
    gradient = case.fdv.cost_gradient(control, bg, case.obs)
    h = case.random_direction(variant)
    slope_term = gradient.dot(h)
    remainders = [
        abs(case.fdv.cost(control + h.scaled(e), bg, case.obs).total - base - e * slope_term)
        for e in (1e-2, 1e-3, 1e-4, 1e-5)
    ]
    slope = np.log10(remainders[0] / remainders[-1]) / 3.0
    assert slope >= 1.9, f"remainders {remainders}"


def test_hessian_is_symmetric():
    case = Case(seed=9)
    bg = case.background(Variant.NN)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    u = case.random_direction(Variant.NN)
    v = case.random_direction(Variant.NN)
    lhs = u.dot(case.fdv.hessian_apply(lin, v))
    rhs = case.fdv.hessian_apply(lin, u).dot(v)
    assert abs(lhs - rhs) <= 1e-9 * abs(lhs)


def test_network_gradient_pair():
    case = Case(seed=10)
    bg = case.background(Variant.NN)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    delta = case.random_direction(Variant.NN)
    grad_p, grad_x0 = case.fdv.gradient_incremental_nn(delta.p, delta.x0, lin)
    full = case.fdv.incremental_gradient(lin, delta)
    assert np.array_equal(grad_p, full.p)
    assert np.array_equal(grad_x0, full.x0)

    sc = case.background(Variant.SC)
    with pytest.raises(ShapeError):
        case.fdv.gradient_incremental_nn(delta.p, delta.x0, case.fdv.linearize(sc.control, sc, case.obs))


def test_gradient_vanishes_at_perfect_guess():
    case = Case(seed=11, obs_error=0.0)
    bg = replace(case.background(Variant.NN), x0=case.truth)
    # identical forcing in the truth run and the guess
    case.obs = simulate_observations(
        case.model.trajectory(case.corrector.apply(case.truth.psi), case.truth, 5)[1::2],
        case.H, 0, 0.0,
    )
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    gradient = case.fdv.incremental_gradient(lin, bg.control.zeros_like())
    assert gradient.norm() == 0.0
    delta, inner = case.fdv.inner_solve(lin)
    assert inner.iterations == 0
    assert delta.norm() == 0.0


def test_conjugate_gradient_costs_decrease():
    case = Case(seed=12, minimizer=MinimizerConfig(n_inner=30, cg_tol=1e-8))
    bg = case.background(Variant.WC)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    delta, inner = case.fdv.inner_solve(lin)
    assert inner.iterations > 0
    assert not inner.negative_curvature
    costs = inner.costs
    scale = abs(costs[0])
    assert all(b <= a + 1e-10 * scale for a, b in zip(costs, costs[1:]))
    assert costs[-1] == pytest.approx(case.fdv.quadratic_cost(lin, delta), rel=1e-8)
    assert costs[-1] < costs[0]


def test_single_outer_loop_matches_dense_solution():
    minimizer = MinimizerConfig(n_outer=1, n_inner=200, cg_tol=1e-10)
    case = Case(seed=13, minimizer=minimizer)
    bg = case.background(Variant.SC)
    lin = case.fdv.linearize(bg.control, bg, case.obs)
    shape = case.model.shape
    n = int(np.prod(shape))

    columns = []
    for k in range(n):
        dx0 = case.cov.B.apply_sqrt(np.eye(n)[k].reshape(shape))
        increments = case.model.tangent_linear(lin.tape, dx0)
        columns.append(np.concatenate([case.H.apply(increments[s]) / 0.2 for s in lin.obs_steps]))
    g = np.array(columns).T
    d = np.concatenate(lin.innovations) / 0.2
    chi = np.linalg.solve(np.eye(n) + g.T @ g, g.T @ d)
    expected = case.xb + case.cov.B.apply_sqrt(chi.reshape(shape))

    result = case.fdv.outer_loop(bg, case.obs)
    assert np.allclose(result.analysis.x0, expected, rtol=0, atol=1e-6 * np.abs(expected).max())
    assert len(result.report.history) == 1


def test_perfect_background_is_kept():
    case = Case(seed=14, obs_error=0.0)
    bg = replace(case.background(Variant.SC), x0=case.truth)
    result = case.fdv.outer_loop(bg, case.obs)
    assert np.array_equal(result.analysis.x0, case.truth.psi)
    assert result.report.total == 0.0
    assert all(h.inner_iterations == 0 for h in result.report.history)


def test_analysis_reduces_cost():
    case = Case(seed=15)
    for variant in (Variant.SC, Variant.WC, Variant.NN):
        result = case.fdv.outer_loop(case.background(variant), case.obs)
        assert result.report.total < result.first_guess_cost.total
        assert len(result.report.history) == 2


def test_vanishing_parameter_error_gives_frozen_network():
    tiny = CovarianceConfig(spectral_floor=1e-3, p=1e-12)
    case = Case(seed=16, cov_cfg=tiny)
    nn = case.fdv.outer_loop(case.background(Variant.NN), case.obs)
    frozen = case.fdv.outer_loop(case.background(Variant.SC_NNA), case.obs)
    scale = np.abs(frozen.analysis.x0).max()
    assert np.allclose(nn.analysis.x0, frozen.analysis.x0, rtol=0, atol=1e-6 * scale)
    assert np.allclose(nn.analysis.p, case.corrector.weights, rtol=0, atol=1e-9)


def test_cycling():
    case = Case(seed=17)
    fdv = case.fdv
    sc = case.background(Variant.SC)
    analysis = ControlVector(Variant.SC, case.truth.psi)
    nxt = fdv.cycle(analysis, sc)
    expected, _ = case.model.resolvent(case.truth, WINDOW, record=False)
    assert np.array_equal(nxt.x0.psi, expected.psi)
    assert nxt.x0.valid_time == WINDOW

    wc = case.background(Variant.WC)
    nxt_wc = fdv.cycle(ControlVector(Variant.WC, case.truth.psi, w=np.zeros(case.model.shape)), wc)
    assert np.array_equal(nxt_wc.x0.psi, expected.psi)
    assert np.array_equal(nxt_wc.w, np.zeros(case.model.shape))

    nn = case.background(Variant.NN)
    pa = nn.p + 0.1
    nxt_nn = fdv.cycle(ControlVector(Variant.NN, case.truth.psi, p=pa), nn)
    w = case.corrector.with_weights(pa).apply(case.truth.psi)
    forced, _ = case.model.resolvent_forced(w, case.truth, WINDOW, record=False)
    assert np.array_equal(nxt_nn.x0.psi, forced.psi)
    assert np.array_equal(nxt_nn.p, pa)


def test_window_checks():
    case = Case(seed=18)
    bg = case.background(Variant.SC)
    shifted = WindowObservations(3600.0, case.obs.batches)
    with pytest.raises(WindowError):
        case.fdv.cost(bg.control, bg, shifted)
    with pytest.raises(WindowError):
        FourDVar(case.model, case.H, r=0.2, window_seconds=1000.0)


def test_control_vector_checks():
    with pytest.raises(ShapeError):
        ControlVector(Variant.WC, np.zeros((2, NY, NX)))
    with pytest.raises(ShapeError):
        ControlVector(Variant.SC, np.zeros((2, NY, NX)), p=np.zeros(3))
    case = Case(seed=19)
    with pytest.raises(ShapeError):
        Background(Variant.SC_NNT, QGState(case.xb), case.cov)
    a = ControlVector(Variant.WC, np.ones((2, NY, NX)), w=np.full((2, NY, NX), 2.0))
    assert a.dot(a) == pytest.approx(64 * 5.0)
    assert (a - a).norm() == 0.0


def main():
    from functools import partial

    from _runner import run_tests

    def each(test, variants):
        return [(f"{test.__name__}[{v.value}]", partial(test, v)) for v in variants]

    return run_tests("4D-VAR TESTS", [
        test_perfect_data_has_zero_cost,
        test_no_observations_leaves_background_term,
        test_cost_terms_against_direct_evaluation,
        test_weak_constraint_with_zero_forcing_is_strong_constraint,
        test_zero_network_is_strong_constraint,
        test_network_cost_is_weak_constraint_with_substituted_forcing,
        *each(test_incremental_gradient_matches_finite_differences,
              (Variant.SC, Variant.WC, Variant.SC_NNA, Variant.NN)),
        *each(test_incremental_gradient_per_component, (Variant.SC, Variant.WC, Variant.NN)),
        test_quadratic_cost_at_zero_is_first_guess_cost,
        *each(test_nonlinear_gradient_taylor, (Variant.SC, Variant.WC, Variant.SC_NNT, Variant.NN)),
        test_hessian_is_symmetric,
        test_network_gradient_pair,
        test_gradient_vanishes_at_perfect_guess,
        test_conjugate_gradient_costs_decrease,
        test_single_outer_loop_matches_dense_solution,
        test_perfect_background_is_kept,
        test_analysis_reduces_cost,
        test_vanishing_parameter_error_gives_frozen_network,
        test_cycling,
        test_window_checks,
        test_control_vector_checks,
    ])


if __name__ == "__main__":
    sys.exit(main())
