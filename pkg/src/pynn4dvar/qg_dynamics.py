"""
Two-layer quasi-geostrophic channel model.

The prognostic variable is the streamfunction of both layers on an nx × ny
grid, periodic in x. Rows 0 and ny-1 are the channel walls where ψ is a
fixed (Dirichlet) boundary. One model step:

1. diagnose PV from ψ,
2. advect PV semi-Lagrangianly with one-step departure points and
   bilinear interpolation (interior rows only, wall-row PV is kept),
3. invert PV back to ψ with the wall values of the input state,
4. optionally add a constant forcing w (forced resolvent).

Every nonlinear step can be recorded on a tape, and `step_tl`/`step_ad`
are the exact tangent-linear and adjoint of the recorded step.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.fft import irfft, rfft
from scipy.linalg import solve_banded

from pynn4dvar.exceptions import InversionError, ShapeError, WindowError

logger = logging.getLogger(__name__)

N_LAYERS = 2


class OrographyConfig(BaseModel):
    """Gaussian hill added to the bottom-layer PV (grid units, nondimensional PV)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    amplitude: float = 0.1
    center_x: float | None = None  # defaults to nx/4
    center_y: float | None = None  # defaults to ny/2
    radius: float = Field(3.0, gt=0)


class QGConfig(BaseModel):
    """
    Physical and numerical parameters of the QG model.

    Lengths are nondimensionalized by `length_scale`, velocities by
    `velocity_scale`; the coupling coefficients are
    F_i = f0² L² / (g' D_i) and the nondimensional beta is β L² / U.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    nx: int = Field(40, ge=4)
    ny: int = Field(20, ge=4)
    n_layers: int = Field(N_LAYERS, ge=N_LAYERS, le=N_LAYERS)
    top_depth: float = Field(6000.0, gt=0)
    bottom_depth: float = Field(4000.0, gt=0)
    dt_seconds: float = Field(600.0, gt=0)
    f0: float = 1.0e-4
    beta: float = 1.5e-11
    reduced_gravity: float = Field(1.0, gt=0)
    length_scale: float = Field(1.0e6, gt=0)
    velocity_scale: float = Field(10.0, gt=0)
    grid_spacing: float = Field(3.0e5, gt=0)
    orography: OrographyConfig = OrographyConfig()

    @model_validator(mode="after")
    def _positive_coupling(self) -> "QGConfig":
        if not (self.f1 > 0 and self.f2 > 0):
            raise ValueError("coupling coefficients F1 and F2 must be strictly positive")
        return self

    @property
    def f1(self) -> float:
        return self.f0 ** 2 * self.length_scale ** 2 / (self.reduced_gravity * self.top_depth)

    @property
    def f2(self) -> float:
        return self.f0 ** 2 * self.length_scale ** 2 / (self.reduced_gravity * self.bottom_depth)

    @property
    def beta_hat(self) -> float:
        return self.beta * self.length_scale ** 2 / self.velocity_scale

    @property
    def shape(self) -> tuple[int, int, int]:
        return (N_LAYERS, self.ny, self.nx)

    @classmethod
    def reference(cls, **overrides) -> "QGConfig":
        """Setup used to generate the synthetic truth."""
        return cls(**{"top_depth": 6000.0, "bottom_depth": 4000.0, "dt_seconds": 600.0, **overrides})

    @classmethod
    def perturbed(cls, **overrides) -> "QGConfig":
        """Setup with perturbed layer depths and time step, used to assimilate."""
        return cls(**{"top_depth": 5750.0, "bottom_depth": 4250.0, "dt_seconds": 1200.0, **overrides})


@dataclass(frozen=True)
class QGState:
    """Streamfunction of both layers, layout (layer, y, x), and its valid time in seconds."""
    psi: np.ndarray
    valid_time: float = 0.0

    def with_psi(self, psi: np.ndarray) -> "QGState":
        return replace(self, psi=psi)

    @property
    def size(self) -> int:
        return self.psi.size


@dataclass(frozen=True)
class PVField:
    """Potential vorticity of both layers, layout (layer, y, x)."""
    q: np.ndarray


@dataclass(frozen=True)
class Departure:
    """Departure points of one semi-Lagrangian step (interior rows) and interpolation weights."""
    i0: np.ndarray
    i1: np.ndarray
    j0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    clamped: np.ndarray

    def interpolate(self, field: np.ndarray) -> np.ndarray:
        layer = np.arange(N_LAYERS)[:, None, None]
        f00 = field[layer, self.j0, self.i0]
        f01 = field[layer, self.j0, self.i1]
        f10 = field[layer, self.j0 + 1, self.i0]
        f11 = field[layer, self.j0 + 1, self.i1]
        a, b = self.a, self.b
        return (1 - a) * (1 - b) * f00 + a * (1 - b) * f01 + (1 - a) * b * f10 + a * b * f11

    def scatter(self, values: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
        """Adjoint of interpolate()."""
        out = np.zeros(shape)
        layer = np.broadcast_to(np.arange(N_LAYERS)[:, None, None], values.shape)
        a, b = self.a, self.b
        np.add.at(out, (layer, self.j0, self.i0), (1 - a) * (1 - b) * values)
        np.add.at(out, (layer, self.j0, self.i1), a * (1 - b) * values)
        np.add.at(out, (layer, self.j0 + 1, self.i0), (1 - a) * b * values)
        np.add.at(out, (layer, self.j0 + 1, self.i1), a * b * values)
        return out


@dataclass(frozen=True)
class TapeEntry:
    time: float
    psi: np.ndarray
    q: np.ndarray
    departure: Departure


@dataclass
class TrajectoryTape:
    """Linearization trajectory of a (possibly forced) nonlinear integration."""
    t0: float
    dt_seconds: float
    entries: list[TapeEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_steps(self) -> int:
        return len(self.entries)


class ModalHelmholtzSolver:
    """
    Solver for the coupled two-layer Helmholtz problem on interior rows.

    The 2×2 coupling matrix [[-F1, F1], [F2, -F2]] is diagonalized into a
    barotropic mode (eigenvalue 0) and a baroclinic mode (eigenvalue
    -(F1+F2)). Each mode is a Helmholtz problem with zero Dirichlet walls,
    solved with a real FFT in x and one tridiagonal solve in y per
    wavenumber; the tridiagonal inverses are factorized once here.
    """

    def __init__(self, nx: int, ny: int, dx: float, f1: float, f2: float):
        self.nx = nx
        self.n_interior = ny - 2
        total = f1 + f2
        self.eigenvectors = np.array([[1.0, f1], [1.0, -f2]])
        self.inverse_eigenvectors = np.array([[f2, f1], [1.0, -1.0]]) / total
        eigenvalues = np.array([0.0, -total])

        n = self.n_interior
        wavenumbers = np.arange(nx // 2 + 1)
        kappa = (2.0 * np.cos(2.0 * np.pi * wavenumbers / nx) - 2.0) / dx ** 2
        identity = np.eye(n)
        self.green = np.empty((N_LAYERS, wavenumbers.size, n, n))
        for m, lam in enumerate(eigenvalues):
            for k, kap in enumerate(kappa):
                banded = np.zeros((3, n))
                banded[0, 1:] = 1.0 / dx ** 2
                banded[1, :] = -2.0 / dx ** 2 + kap + lam
                banded[2, :-1] = 1.0 / dx ** 2
                self.green[m, k] = solve_banded((1, 1), banded, identity)

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Solve S ψ = rhs (or Sᵀ ψ = rhs) for rhs of shape (2, ny-2, nx)."""
        if transpose:
            left, right = self.inverse_eigenvectors.T, self.eigenvectors.T
        else:
            left, right = self.eigenvectors, self.inverse_eigenvectors
        modal = np.einsum("lm,myx->lyx", right, rhs)
        spectral = rfft(modal, axis=-1)
        spectral = np.einsum("mkij,mjk->mik", self.green, spectral)
        modal = irfft(spectral, n=self.nx, axis=-1)
        return np.einsum("lm,myx->lyx", left, modal)


def orography_field(cfg: QGConfig) -> np.ndarray:
    """Gaussian hill on the bottom layer, periodic distance in x."""
    oro = cfg.orography
    cx = cfg.nx / 4 if oro.center_x is None else oro.center_x
    cy = cfg.ny / 2 if oro.center_y is None else oro.center_y
    x = np.arange(cfg.nx)
    y = np.arange(cfg.ny)
    dxp = (x - cx + cfg.nx / 2) % cfg.nx - cfg.nx / 2
    dyp = y - cy
    r2 = dxp[None, :] ** 2 + dyp[:, None] ** 2
    return oro.amplitude * np.exp(-r2 / oro.radius ** 2)


class QGModel:
    """
    The QG model for one configuration.

    Instances are immutable after construction; all methods are pure
    functions of their arguments and can be shared between threads.
    """

    def __init__(self, cfg: QGConfig, orography: np.ndarray | None = None):
        self.cfg = cfg
        self.shape = cfg.shape
        self.dx = cfg.grid_spacing / cfg.length_scale
        self.dt = cfg.dt_seconds * cfg.velocity_scale / cfg.length_scale
        self.coupling = np.array([[-cfg.f1, cfg.f1], [cfg.f2, -cfg.f2]])

        rs = orography_field(cfg) if orography is None else np.asarray(orography, dtype=float)
        if rs.shape != (cfg.ny, cfg.nx):
            raise ShapeError(f"Orography must have shape {(cfg.ny, cfg.nx)}, got {rs.shape}")
        self.orography = rs
        y = (np.arange(cfg.ny) - (cfg.ny - 1) / 2) * self.dx
        self.background_pv = np.empty(self.shape)
        self.background_pv[:] = cfg.beta_hat * y[None, :, None]
        self.background_pv[1] += rs

        self.solver = ModalHelmholtzSolver(cfg.nx, cfg.ny, self.dx, cfg.f1, cfg.f2)
        self._cols = np.arange(cfg.nx)[None, None, :]
        self._rows = np.arange(1, cfg.ny - 1)[None, :, None]
        for arr in (self.orography, self.background_pv):
            arr.flags.writeable = False

    # -- shape checks ---------------------------------------------------

    def check(self, psi: np.ndarray, what: str = "state") -> np.ndarray:
        psi = np.asarray(psi)
        if psi.shape != self.shape:
            raise ShapeError(f"{what} must have shape {self.shape}, got {psi.shape}")
        return psi

    def zeros(self, valid_time: float = 0.0) -> QGState:
        return QGState(np.zeros(self.shape), valid_time)

    def interior(self, w: np.ndarray, what: str = "forcing") -> np.ndarray:
        """Copy of a state-shaped field with the wall rows zeroed; forcing never touches wall ψ."""
        w = np.array(self.check(w, what), dtype=float)
        w[:, 0, :] = 0.0
        w[:, -1, :] = 0.0
        return w

    # -- linear building blocks -----------------------------------------

    def _laplacian(self, psi: np.ndarray) -> np.ndarray:
        dx2 = self.dx ** 2
        lap = (np.roll(psi, -1, axis=-1) - 2.0 * psi + np.roll(psi, 1, axis=-1)) / dx2
        lap[:, 1:-1, :] += (psi[:, 2:, :] - 2.0 * psi[:, 1:-1, :] + psi[:, :-2, :]) / dx2
        return lap

    def _laplacian_ad(self, lap_ad: np.ndarray) -> np.ndarray:
        dx2 = self.dx ** 2
        psi_ad = (np.roll(lap_ad, 1, axis=-1) - 2.0 * lap_ad + np.roll(lap_ad, -1, axis=-1)) / dx2
        inner = lap_ad[:, 1:-1, :] / dx2
        psi_ad[:, 2:, :] += inner
        psi_ad[:, 1:-1, :] -= 2.0 * inner
        psi_ad[:, :-2, :] += inner
        return psi_ad

    def pv_linear(self, psi: np.ndarray) -> np.ndarray:
        """Linear part of the PV operator (no beta or orography term)."""
        return self._laplacian(psi) + np.einsum("lm,myx->lyx", self.coupling, psi)

    def pv_linear_ad(self, q_ad: np.ndarray) -> np.ndarray:
        return self._laplacian_ad(q_ad) + np.einsum("ml,myx->lyx", self.coupling, q_ad)

    def _winds(self, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) = (-∂ψ/∂y, ∂ψ/∂x) on interior rows, centred differences."""
        u = -(psi[:, 2:, :] - psi[:, :-2, :]) / (2.0 * self.dx)
        inner = psi[:, 1:-1, :]
        v = (np.roll(inner, -1, axis=-1) - np.roll(inner, 1, axis=-1)) / (2.0 * self.dx)
        return u, v

    def _winds_ad(self, u_ad: np.ndarray, v_ad: np.ndarray) -> np.ndarray:
        psi_ad = np.zeros(self.shape)
        scale = 1.0 / (2.0 * self.dx)
        psi_ad[:, 2:, :] -= scale * u_ad
        psi_ad[:, :-2, :] += scale * u_ad
        psi_ad[:, 1:-1, :] += scale * (np.roll(v_ad, 1, axis=-1) - np.roll(v_ad, -1, axis=-1))
        return psi_ad

    def _wall_rhs(self, r_interior: np.ndarray, psi: np.ndarray) -> np.ndarray:
        rhs = r_interior.copy()
        rhs[:, 0, :] -= psi[:, 0, :] / self.dx ** 2
        rhs[:, -1, :] -= psi[:, -1, :] / self.dx ** 2
        return rhs

    # -- PV diagnosis and inversion ---------------------------------------

    def pv_from_psi(self, state: QGState) -> PVField:
        """
        Diagnose potential vorticity.

        q₁ = ∇²ψ₁ − F₁(ψ₁−ψ₂) + β̂y and q₂ = ∇²ψ₂ − F₂(ψ₂−ψ₁) + β̂y + rs.
        Interior rows use the 5-point Laplacian; wall rows only the
        x-curvature, so wall PV depends on wall ψ alone.
        """
        psi = self.check(state.psi)
        return PVField(self.pv_linear(psi) + self.background_pv)

    def psi_from_pv(self, pv: PVField, boundary: QGState) -> QGState:
        """
        Invert interior-row PV to ψ, with the wall rows of ψ taken from `boundary`.

        Raises:
            ShapeError: If the fields do not match the grid
            InversionError: If the inversion produces non-finite values
        """
        q = self.check(pv.q, "PV field")
        walls = self.check(boundary.psi, "boundary")
        r = q[:, 1:-1, :] - self.background_pv[:, 1:-1, :]
        psi = walls.copy()
        psi[:, 1:-1, :] = self.solver.solve(self._wall_rhs(r, walls))
        if not np.all(np.isfinite(psi)):
            raise InversionError("PV inversion produced non-finite streamfunction")
        return QGState(psi, boundary.valid_time)

    # -- nonlinear step -------------------------------------------------

    def _departure(self, psi: np.ndarray, q: np.ndarray) -> Departure:
        nx, ny = self.cfg.nx, self.cfg.ny
        u, v = self._winds(psi)
        shift_x = -self.dt * u / self.dx
        shift_y = -self.dt * v / self.dx

        whole = np.floor(shift_x)
        a = shift_x - whole
        i0 = (self._cols + whole.astype(np.int64)) % nx
        i1 = (i0 + 1) % nx

        fj = self._rows + shift_y
        clamped = (fj < 0.0) | (fj > ny - 1)
        fj = np.clip(fj, 0.0, ny - 1.0)
        j0 = np.minimum(np.floor(fj).astype(np.int64), ny - 2)
        b = fj - j0

        layer = np.arange(N_LAYERS)[:, None, None]
        f00 = q[layer, j0, i0]
        f01 = q[layer, j0, i1]
        f10 = q[layer, j0 + 1, i0]
        f11 = q[layer, j0 + 1, i1]
        gx = (1 - b) * (f01 - f00) + b * (f11 - f10)
        gy = np.where(clamped, 0.0, (1 - a) * (f10 - f00) + a * (f11 - f01))
        return Departure(i0, i1, j0, a, b, gx, gy, clamped)

    def step(self, state: QGState) -> tuple[QGState, TapeEntry]:
        """
        Advance one model time step.

        Returns:
            The new state and the tape entry needed to linearize this step

        Raises:
            ShapeError: If the state does not match the grid
            InversionError: If the inversion produces non-finite values
        """
        psi = self.check(state.psi)
        q = self.pv_linear(psi) + self.background_pv
        departure = self._departure(psi, q)
        advected = departure.interpolate(q)
        r = advected - self.background_pv[:, 1:-1, :]
        new = psi.copy()
        new[:, 1:-1, :] = self.solver.solve(self._wall_rhs(r, psi))
        if not np.all(np.isfinite(new)):
            raise InversionError(f"Non-finite streamfunction after step at t={state.valid_time}")
        entry = TapeEntry(state.valid_time, psi.copy(), q, departure)
        return QGState(new, state.valid_time + self.cfg.dt_seconds), entry

    def step_tl(self, entry: TapeEntry, dpsi: np.ndarray) -> np.ndarray:
        """Tangent linear of step() about a tape entry."""
        dep = entry.departure
        dq = self.pv_linear(dpsi)
        du, dv = self._winds(dpsi)
        dshift_x = -self.dt * du / self.dx
        dshift_y = -self.dt * dv / self.dx
        dadvected = dep.interpolate(dq) + dep.gx * dshift_x + dep.gy * dshift_y
        dnew = dpsi.copy()
        dnew[:, 1:-1, :] = self.solver.solve(self._wall_rhs(dadvected, dpsi))
        return dnew

    def step_ad(self, entry: TapeEntry, dnew_ad: np.ndarray) -> np.ndarray:
        """Adjoint of step_tl()."""
        dep = entry.departure
        dpsi_ad = np.zeros(self.shape)
        dpsi_ad[:, 0, :] = dnew_ad[:, 0, :]
        dpsi_ad[:, -1, :] = dnew_ad[:, -1, :]

        rhs_ad = self.solver.solve(dnew_ad[:, 1:-1, :], transpose=True)
        dpsi_ad[:, 0, :] -= rhs_ad[:, 0, :] / self.dx ** 2
        dpsi_ad[:, -1, :] -= rhs_ad[:, -1, :] / self.dx ** 2

        dq_ad = dep.scatter(rhs_ad, self.shape)
        du_ad = -self.dt / self.dx * (dep.gx * rhs_ad)
        dv_ad = -self.dt / self.dx * (dep.gy * rhs_ad)
        dpsi_ad += self._winds_ad(du_ad, dv_ad)
        dpsi_ad += self.pv_linear_ad(dq_ad)
        return dpsi_ad

    # -- resolvents -----------------------------------------------------

    def n_steps(self, t0: float, t1: float) -> int:
        """Number of model steps between t0 and t1."""
        ratio = (t1 - t0) / self.cfg.dt_seconds
        n = int(round(ratio))
        if n < 0 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
            raise WindowError(
                f"Interval {t1 - t0} s is not a non-negative multiple of dt={self.cfg.dt_seconds} s"
            )
        return n

    def resolvent(self, state: QGState, t1: float, record: bool = True) -> tuple[QGState, TrajectoryTape]:
        """Integrate the model from state.valid_time to t1."""
        return self.resolvent_forced(None, state, t1, record=record)

    def resolvent_forced(
        self, w: np.ndarray | None, state: QGState, t1: float, record: bool = True
    ) -> tuple[QGState, TrajectoryTape]:
        """
        Integrate the w-debiased model: the constant forcing w is added after every model step.

        Only the interior rows of w are applied, so wall ψ and wall PV stay
        at their initial values.

        Args:
            w: State-shaped forcing (wall rows ignored), or None for the unforced model
            state: Initial state (its valid_time is t0)
            t1: Final time in seconds
            record: Whether to keep the linearization tape

        Returns:
            The final state and the trajectory tape (empty when record is False)
        """
        n = self.n_steps(state.valid_time, t1)
        if w is not None:
            w = self.interior(w)
        tape = TrajectoryTape(state.valid_time, self.cfg.dt_seconds)
        for _ in range(n):
            state, entry = self.step(state)
            if w is not None:
                state = state.with_psi(state.psi + w)
            if record:
                tape.entries.append(entry)
        return state, tape

    def trajectory(
        self, w: np.ndarray | None, state: QGState, n_steps: int, every: int = 1
    ) -> list[QGState]:
        """States after every `every` steps, starting with the initial state."""
        if w is not None:
            w = self.interior(w)
        states = [state]
        for n in range(1, n_steps + 1):
            state, _ = self.step(state)
            if w is not None:
                state = state.with_psi(state.psi + w)
            if n % every == 0:
                states.append(state)
        return states

    # -- window-level linear operators ----------------------------------

    def tangent_linear(
        self, tape: TrajectoryTape, dx: np.ndarray, dw: np.ndarray | None = None
    ) -> list[np.ndarray]:
        """
        Tangent linear of resolvent_forced along a tape.

        Returns:
            The increments δx_0, ..., δx_N with δx_n = M_n δx_{n-1} + δw
        """
        dx = self.check(dx, "state increment")
        if dw is not None:
            dw = self.interior(dw, "forcing increment")
        increments = [np.array(dx, dtype=float)]
        for entry in tape.entries:
            dx = self.step_tl(entry, dx)
            if dw is not None:
                dx = dx + dw
            increments.append(dx)
        return increments

    def adjoint(self, tape: TrajectoryTape, sources: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """
        Adjoint of tangent_linear.

        Args:
            tape: The linearization tape
            sources: One adjoint forcing per increment δx_0, ..., δx_N

        Returns:
            (adjoint of δx_0, adjoint of δw)
        """
        if len(sources) != tape.n_steps + 1:
            raise ShapeError(f"Expected {tape.n_steps + 1} adjoint sources, got {len(sources)}")
        adx = np.array(self.check(sources[-1], "adjoint source"), dtype=float)
        adw = np.zeros(self.shape)
        for n in range(tape.n_steps, 0, -1):
            adw += adx
            adx = self.step_ad(tape.entries[n - 1], adx) + self.check(sources[n - 1], "adjoint source")
        return adx, self.interior(adw, "forcing adjoint")

    # -- diagnostics ----------------------------------------------------

    def energy(self, state: QGState) -> float:
        """Kinetic plus available potential energy per grid cell (nondimensional)."""
        psi = self.check(state.psi)
        gx = (np.roll(psi, -1, axis=-1) - psi) / self.dx
        gy = (psi[:, 1:, :] - psi[:, :-1, :]) / self.dx
        kinetic = 0.5 * (np.mean(gx ** 2) + np.mean(gy ** 2)) * N_LAYERS
        f1, f2 = self.cfg.f1, self.cfg.f2
        potential = 0.5 * (f1 * f2 / (f1 + f2)) * np.mean((psi[0] - psi[1]) ** 2)
        return float(kinetic + potential)


def jet_initial_condition(
    model: QGModel,
    seed: int,
    amplitudes: tuple[float, float] = (1.0, 0.5),
    noise: float = 1.0e-3,
) -> QGState:
    """
    Two-layer zonal jet ψ_i = -A_i tanh((y - y_c)/σ) with σ = ny/6, plus seeded noise.

    The noise is applied to interior rows only, so the wall values are the
    clean jet profile.
    """
    nx, ny = model.cfg.nx, model.cfg.ny
    y = np.arange(ny, dtype=float)
    profile = np.tanh((y - (ny - 1) / 2) / (ny / 6))
    psi = np.empty(model.shape)
    for layer, amplitude in enumerate(amplitudes):
        psi[layer] = -amplitude * profile[:, None]
    rng = np.random.default_rng(seed)
    psi[:, 1:-1, :] += noise * rng.standard_normal((N_LAYERS, ny - 2, nx))
    return QGState(psi, 0.0)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-squared difference over all state variables."""
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))
