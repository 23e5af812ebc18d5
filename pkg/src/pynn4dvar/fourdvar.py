"""
Strong-constraint, weak-constraint and neural-network 4D-Var.

All variants share one incremental machinery. They differ only in how the
control vector maps onto the constant model forcing w of the window:

    SC              no forcing
    SC-NNt, SC-NNa  w = F(p, x₀) with frozen weights p
    WC              w is a control variable
    NN              w = F(p, x₀) with p a control variable

The gradient of the incremental cost runs the tangent-linear model
forward, with the forcing increment added after every model step, and
then the adjoint model backward, accumulating the forcing adjoint. The
forcing adjoint is then mapped back through the network (to x₀ and p)
and the background terms are added.

The inner loop is a conjugate gradient in the preconditioned variable
χ = U⁻¹δ, U = blockdiag(B^{1/2}, Q^{1/2} or P^{1/2}).
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from pynn4dvar.covariances_obs import (
    DAY,
    Covariances,
    ObservationOperator,
    WindowObservations,
)
from pynn4dvar.exceptions import DivergenceError, ShapeError, WindowError
from pynn4dvar.neural_net import ColumnCorrector
from pynn4dvar.qg_dynamics import QGModel, QGState, TrajectoryTape

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    SC = "SC"
    WC = "WC"
    SC_NNT = "SC-NNt"
    SC_NNA = "SC-NNa"
    NN = "NN"

    @property
    def has_w(self) -> bool:
        return self is Variant.WC

    @property
    def has_p(self) -> bool:
        return self is Variant.NN

    @property
    def uses_corrector(self) -> bool:
        return self in (Variant.SC_NNT, Variant.SC_NNA, Variant.NN)


class MinimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_outer: int = Field(2, gt=0)
    n_inner: int = Field(40, gt=0)
    cg_tol: float = Field(1.0e-3, gt=0)


@dataclass(frozen=True)
class ControlVector:
    """Control (or increment, or gradient) vector: x₀ plus w (WC) or p (NN)."""
    variant: Variant
    x0: np.ndarray
    w: np.ndarray | None = None
    p: np.ndarray | None = None

    def __post_init__(self):
        if (self.w is not None) != self.variant.has_w or (self.p is not None) != self.variant.has_p:
            raise ShapeError(f"Control vector fields do not match variant {self.variant.value}")

    def _blocks(self) -> list[np.ndarray]:
        return [b for b in (self.x0, self.w, self.p) if b is not None]

    def _combine(self, other: "ControlVector", fn) -> "ControlVector":
        pick = lambda a, b: None if a is None else fn(a, b)
        return ControlVector(self.variant, fn(self.x0, other.x0), pick(self.w, other.w), pick(self.p, other.p))

    def __add__(self, other: "ControlVector") -> "ControlVector":
        return self._combine(other, np.add)

    def __sub__(self, other: "ControlVector") -> "ControlVector":
        return self._combine(other, np.subtract)

    def scaled(self, alpha: float) -> "ControlVector":
        return self._combine(self, lambda a, _: alpha * a)

    def dot(self, other: "ControlVector") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self._blocks(), other._blocks())))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def zeros_like(self) -> "ControlVector":
        return self.scaled(0.0)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in self._blocks())


@dataclass(frozen=True)
class Background:
    """Prior information for one window."""
    variant: Variant
    x0: QGState
    covariances: Covariances
    w: np.ndarray | None = None
    p: np.ndarray | None = None
    corrector: ColumnCorrector | None = None

    def __post_init__(self):
        if self.variant.uses_corrector and self.corrector is None:
            raise ShapeError(f"Variant {self.variant.value} needs a column corrector")
        if self.variant.has_p and self.p is None:
            raise ShapeError("NN variant needs a parameter prior")
        if self.variant.has_w and self.w is None:
            raise ShapeError("WC variant needs a forcing prior")

    @property
    def t0(self) -> float:
        return self.x0.valid_time

    @property
    def control(self) -> ControlVector:
        return ControlVector(
            self.variant,
            np.array(self.x0.psi, dtype=float),
            None if self.w is None else np.array(self.w, dtype=float),
            None if self.p is None else np.array(self.p, dtype=float),
        )

    def corrector_for(self, control: "ControlVector") -> ColumnCorrector | None:
        """Corrector with the weights of an NN control, or the frozen weights for SC-NN*."""
        if not control.variant.uses_corrector:
            return None
        if self.corrector is None:
            raise ShapeError(f"Variant {control.variant.value} needs a column corrector")
        return self.corrector.with_weights(control.p) if control.variant.has_p else self.corrector


@dataclass
class OuterDiagnostics:
    outer: int
    cost_total: float
    cost_background: float
    cost_model: float
    cost_observation: float
    gradient_norm: float
    inner_iterations: int
    negative_curvature: bool


@dataclass
class CostReport:
    background: float
    model: float
    observation: float
    gradient_norm: float = float("nan")
    history: list[OuterDiagnostics] = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.background + self.model + self.observation


@dataclass
class InnerDiagnostics:
    iterations: int
    costs: list[float]
    residual_ratio: float
    negative_curvature: bool


@dataclass
class Linearization:
    """Everything the incremental cost needs from one outer iteration."""
    background: Background
    guess: ControlVector
    forcing: np.ndarray | None
    tape: TrajectoryTape
    obs_steps: list[int]
    innovations: list[np.ndarray]
    corrector: ColumnCorrector | None
    cost: CostReport


@dataclass
class AnalysisResult:
    analysis: ControlVector
    report: CostReport
    first_guess_cost: CostReport


class FourDVar:
    """
    4D-Var for one model, observation operator and set of covariances.

    Args:
        model: The assimilating QG model
        obs_operator: Observation operator of the network
        r: Observation error standard deviation assumed by the cost
        minimizer: Outer/inner loop settings
        window_seconds: Length of one assimilation window
    """

    def __init__(
        self,
        model: QGModel,
        obs_operator: ObservationOperator,
        r: float,
        minimizer: MinimizerConfig | None = None,
        window_seconds: float = DAY,
    ):
        self.model = model
        self.H = obs_operator
        self.r = r
        self.minimizer = minimizer or MinimizerConfig()
        self.window_seconds = window_seconds
        model.n_steps(0.0, window_seconds)

    # -- trajectory -----------------------------------------------------

    def obs_steps(self, obs: WindowObservations, t0: float) -> list[int]:
        if abs(obs.window_start - t0) > 1e-6:
            raise WindowError(f"Observations start at {obs.window_start}, window at {t0}")
        steps = []
        for batch in obs.batches:
            if not 0.0 <= batch.time_offset <= self.window_seconds:
                raise WindowError(f"Batch at t0+{batch.time_offset} s lies outside the window")
            if batch.values.shape != (self.H.network.size,):
                raise ShapeError(f"Batch has {batch.values.shape} values, network has {self.H.network.size}")
            steps.append(self.model.n_steps(0.0, batch.time_offset))
        return steps

    def forcing(self, control: ControlVector, background: Background) -> np.ndarray | None:
        """Constant window forcing implied by a control vector."""
        if control.variant.has_w:
            return control.w
        corrector = background.corrector_for(control)
        return None if corrector is None else corrector.apply(control.x0)

    def _integrate(self, x0, w, t0, steps, record):
        """States at the observation steps and the linearization tape."""
        n_max = max(steps, default=0)
        if w is not None:
            w = self.model.interior(w)
        state = QGState(np.asarray(x0, dtype=float), t0)
        tape = TrajectoryTape(t0, self.model.cfg.dt_seconds)
        wanted = set(steps)
        at_obs = {}
        for n in range(n_max + 1):
            if n in wanted:
                at_obs[n] = state.psi
            if n == n_max:
                break
            state, entry = self.model.step(state)
            if w is not None:
                state = state.with_psi(state.psi + w)
            if record:
                tape.entries.append(entry)
        if not all(np.all(np.isfinite(psi)) for psi in at_obs.values()):
            raise DivergenceError("Non-finite trajectory inside the window")
        return [at_obs[n] for n in steps], tape

    # -- nonlinear costs ------------------------------------------------

    def _prior_terms(self, control: ControlVector, background: Background) -> tuple[float, float]:
        cov = background.covariances
        jb = 0.5 * cov.B.norm2(control.x0 - background.x0.psi)
        jm = 0.0
        if control.variant.has_w:
            jm = 0.5 * cov.Q.norm2(control.w - background.w)
        elif control.variant.has_p:
            jm = 0.5 * cov.P.norm2(control.p - background.p)
        return jb, jm

    def _obs_term(self, innovations: list[np.ndarray]) -> float:
        return 0.5 * sum(float(np.vdot(d, d)) for d in innovations) / self.r ** 2

    def cost(self, control: ControlVector, background: Background, obs: WindowObservations) -> CostReport:
        """Nonlinear cost of any variant."""
        steps = self.obs_steps(obs, background.t0)
        w = self.forcing(control, background)
        states, _ = self._integrate(control.x0, w, background.t0, steps, record=False)
        innovations = [b.values - self.H.apply(x) for b, x in zip(obs.batches, states)]
        jb, jm = self._prior_terms(control, background)
        return CostReport(jb, jm, self._obs_term(innovations))

    def cost_sc(self, x0: np.ndarray, background: Background, obs: WindowObservations) -> CostReport:
        return self.cost(ControlVector(Variant.SC, x0), replace(background, variant=Variant.SC), obs)

    def cost_wc(self, w: np.ndarray, x0: np.ndarray, background: Background, obs: WindowObservations) -> CostReport:
        return self.cost(ControlVector(Variant.WC, x0, w=w), background, obs)

    def cost_nn(self, p: np.ndarray, x0: np.ndarray, background: Background, obs: WindowObservations) -> CostReport:
        return self.cost(ControlVector(Variant.NN, x0, p=p), background, obs)

    # -- incremental machinery ------------------------------------------

    def linearize(self, guess: ControlVector, background: Background, obs: WindowObservations) -> Linearization:
        steps = self.obs_steps(obs, background.t0)
        w = self.forcing(guess, background)
        states, tape = self._integrate(guess.x0, w, background.t0, steps, record=True)
        innovations = [b.values - self.H.apply(x) for b, x in zip(obs.batches, states)]
        jb, jm = self._prior_terms(guess, background)
        cost = CostReport(jb, jm, self._obs_term(innovations))
        return Linearization(
            background, guess, w, tape, steps, innovations, background.corrector_for(guess), cost
        )

    def _forcing_tl(self, lin: Linearization, delta: ControlVector) -> np.ndarray | None:
        if delta.variant.has_w:
            return delta.w
        if lin.corrector is None:
            return None
        dw = lin.corrector.tl_state(lin.guess.x0, delta.x0)
        if delta.variant.has_p:
            dw = dw + lin.corrector.tl_params(lin.guess.x0, delta.p)
        return dw

    def _gradient(self, lin: Linearization, delta: ControlVector, affine: bool) -> ControlVector:
        """
        Gradient of the incremental cost at `delta`.

        With affine=False the innovations and the first-guess departure from
        the background are dropped, which gives the Hessian-vector product.
        """
        model = self.model
        dw = self._forcing_tl(lin, delta)
        increments = model.tangent_linear(lin.tape, delta.x0, dw)

        sources = [np.zeros(model.shape) for _ in increments]
        for n, d in zip(lin.obs_steps, lin.innovations):
            residual = self.H.apply(increments[n])
            if affine:
                residual = residual - d
            sources[n] += self.H.adjoint(residual) / self.r ** 2
        adx, adw = model.adjoint(lin.tape, sources)

        grad_w = grad_p = None
        if delta.variant.has_w:
            grad_w = adw
        elif lin.corrector is not None:
            adx = adx + lin.corrector.ad_state(lin.guess.x0, adw)
            if delta.variant.has_p:
                grad_p = lin.corrector.ad_params(lin.guess.x0, adw)

        bg = lin.background
        cov = bg.covariances
        offset = lin.guess + delta if affine else delta
        adx = adx + cov.B.apply_inv(offset.x0 - (bg.x0.psi if affine else 0.0))
        if grad_w is not None:
            grad_w = grad_w + cov.Q.apply_inv(offset.w - (bg.w if affine else 0.0))
        if grad_p is not None:
            grad_p = grad_p + cov.P.apply_inv(offset.p - (bg.p if affine else 0.0))
        return ControlVector(delta.variant, adx, grad_w, grad_p)

    def incremental_gradient(self, lin: Linearization, delta: ControlVector) -> ControlVector:
        return self._gradient(lin, delta, affine=True)

    def hessian_apply(self, lin: Linearization, delta: ControlVector) -> ControlVector:
        return self._gradient(lin, delta, affine=False)

    def gradient_incremental_nn(
        self, dp: np.ndarray, dx0: np.ndarray, lin: Linearization
    ) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of the NN incremental cost with respect to (δp, δx₀)."""
        if lin.guess.variant is not Variant.NN:
            raise ShapeError("Linearization does not belong to the NN variant")
        grad = self.incremental_gradient(lin, ControlVector(Variant.NN, dx0, p=dp))
        return grad.p, grad.x0

    def quadratic_cost(self, lin: Linearization, delta: ControlVector) -> float:
        """Incremental cost Ĵ(δ) evaluated directly (used for checks)."""
        model = self.model
        increments = model.tangent_linear(lin.tape, delta.x0, self._forcing_tl(lin, delta))
        jo = sum(
            float(np.sum((self.H.apply(increments[n]) - d) ** 2))
            for n, d in zip(lin.obs_steps, lin.innovations)
        )
        jb, jm = self._prior_terms(lin.guess + delta, lin.background)
        return jb + jm + 0.5 * jo / self.r ** 2

    def cost_gradient(self, control: ControlVector, background: Background, obs: WindowObservations) -> ControlVector:
        """Gradient of the nonlinear cost at a control vector."""
        lin = self.linearize(control, background, obs)
        return self.incremental_gradient(lin, control.zeros_like())

    # -- preconditioning ------------------------------------------------

    def _sqrt(self, cov: Covariances, chi: ControlVector) -> ControlVector:
        return ControlVector(
            chi.variant,
            cov.B.apply_sqrt(chi.x0),
            None if chi.w is None else cov.Q.apply_sqrt(chi.w),
            None if chi.p is None else cov.P.apply_sqrt(chi.p),
        )

    def _sqrt_T(self, cov: Covariances, v: ControlVector) -> ControlVector:
        return ControlVector(
            v.variant,
            cov.B.apply_sqrt_T(v.x0),
            None if v.w is None else cov.Q.apply_sqrt_T(v.w),
            None if v.p is None else cov.P.apply_sqrt_T(v.p),
        )

    def inner_solve(self, lin: Linearization) -> tuple[ControlVector, InnerDiagnostics]:
        """
        Minimize the incremental cost by conjugate gradient in χ-space.

        Returns:
            The increment δ = Uχ and the CG diagnostics. The quadratic cost
            of every iterate is recorded; it is nonincreasing for CG on a
            positive definite Hessian.
        """
        cfg = self.minimizer
        cov = lin.background.covariances
        zero = lin.guess.zeros_like()
        g0 = self._sqrt_T(cov, self.incremental_gradient(lin, zero))

        chi = zero
        residual = g0.scaled(-1.0)
        b = residual
        direction = residual
        rr = residual.dot(residual)
        r0 = np.sqrt(rr)
        j0 = lin.cost.total
        costs = [j0]
        negative = False
        iterations = 0
        ratio = 0.0 if r0 == 0.0 else 1.0

        while r0 > 0.0 and iterations < cfg.n_inner:
            a_dir = self._sqrt_T(cov, self.hessian_apply(lin, self._sqrt(cov, direction)))
            curvature = direction.dot(a_dir)
            if not curvature > 0.0:
                negative = True
                logger.warning("Non-positive curvature %.3e in CG iteration %d", curvature, iterations + 1)
                break
            alpha = rr / curvature
            chi = chi + direction.scaled(alpha)
            residual = residual - a_dir.scaled(alpha)
            iterations += 1
            costs.append(j0 - 0.5 * chi.dot(b + residual))
            rr_new = residual.dot(residual)
            ratio = float(np.sqrt(rr_new) / r0)
            if ratio <= cfg.cg_tol:
                break
            direction = residual + direction.scaled(rr_new / rr)
            rr = rr_new

        return self._sqrt(cov, chi), InnerDiagnostics(iterations, costs, ratio, negative)

    # -- outer loop and cycling -----------------------------------------

    def outer_loop(self, background: Background, obs: WindowObservations) -> AnalysisResult:
        """
        Incremental minimization starting from the background.

        Raises:
            DivergenceError: If the analysis becomes non-finite
        """
        guess = background.control
        history = []
        first_cost = None
        for outer in range(self.minimizer.n_outer):
            lin = self.linearize(guess, background, obs)
            if first_cost is None:
                first_cost = lin.cost
            gradient_norm = self.incremental_gradient(lin, guess.zeros_like()).norm()
            delta, inner = self.inner_solve(lin)
            guess = guess + delta
            if not guess.is_finite():
                raise DivergenceError("Non-finite analysis increment")
            c = lin.cost
            history.append(OuterDiagnostics(
                outer, c.total, c.background, c.model, c.observation, gradient_norm,
                inner.iterations, inner.negative_curvature,
            ))
            logger.debug(
                "outer %d: J=%.6e (Jb=%.3e Jm=%.3e Jo=%.3e) |g|=%.3e inner=%d",
                outer, c.total, c.background, c.model, c.observation, gradient_norm, inner.iterations,
            )
        report = self.cost(guess, background, obs)
        report.gradient_norm = self.cost_gradient(guess, background, obs).norm()
        report.history = history
        first_cost.gradient_norm = history[0].gradient_norm
        return AnalysisResult(guess, report, first_cost)

    def forecast(
        self, analysis: ControlVector, background: Background, t1: float,
    ) -> QGState:
        """Forecast of an analysis with the variant's constant window forcing."""
        w = self.forcing(analysis, background)
        state, _ = self.model.resolvent_forced(w, QGState(analysis.x0, background.t0), t1, record=False)
        return state

    def cycle(self, analysis: ControlVector, background: Background) -> Background:
        """Next background: forecast of the analysis to the next window, persistence for w and p."""
        t1 = background.t0 + self.window_seconds
        x0 = self.forecast(analysis, background, t1)
        if not np.all(np.isfinite(x0.psi)):
            raise DivergenceError("Non-finite background forecast")
        return replace(background, x0=x0, w=analysis.w, p=analysis.p)
