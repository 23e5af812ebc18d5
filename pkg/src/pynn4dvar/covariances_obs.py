"""
Error covariances, observation network and observation operator.

Covariances are separable: a periodic Gaussian correlation in x applied
with a real FFT, a reflected Gaussian correlation in y applied with an
orthonormal DCT-II, and a 2×2 inter-layer correlation. The correlation
spectra are floored at a small fraction of their maximum and the operator
is rescaled to unit diagonal, so that the square root and the inverse
exist and are cheap.

Observations are scalar streamfunction values at fixed fractional grid
positions, each on one layer, taken every 2 h starting 1 h into every
1-day window.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.fft import dct, idct, irfft, rfft
from scipy.stats import qmc

from pynn4dvar.exceptions import DataError, ShapeError, WindowError
from pynn4dvar.qg_dynamics import QGState
from pynn4dvar.serialization import read_table, write_table

logger = logging.getLogger(__name__)

HOUR = 3600.0
DAY = 86400.0

NETWORK_HEADER = ("location_id", "x", "y", "layer")
OBS_HEADER = ("time", "location_id", "layer", "value", "error_std")
DEFAULT_NETWORK = Path(__file__).parent / "data" / "obs_network.csv"


class CovarianceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    b: float = Field(0.4, gt=0)
    q: float = Field(0.004, gt=0)
    p: float = Field(0.02, gt=0)
    r: float = Field(0.2, gt=0)
    short_length: float = Field(2.0, gt=0)
    long_length: float = Field(6.0, gt=0)
    layer_correlation: float = Field(0.5, ge=0, lt=1)
    spectral_floor: float = Field(1.0e-6, gt=0, lt=1)


def _gaussian(distance: np.ndarray, length: float) -> np.ndarray:
    return np.exp(-0.5 * (distance / length) ** 2)


class GaussianCorrelation:
    """
    Separable correlation operator C = D^{-1/2} (R ⊗ C_y ⊗ C_x) D^{-1/2} on (layer, y, x) fields.

    `apply_sqrt` is U with C = U Uᵀ; `apply_sqrt_T` is Uᵀ.
    """

    def __init__(self, nx: int, ny: int, length: float, layer_correlation: float, floor: float = 1e-6):
        self.shape = (2, ny, nx)
        self.length = length

        d = np.arange(nx)
        d = np.minimum(d, nx - d)
        spec_x = rfft(_gaussian(d, length)).real
        self.spec_x = np.maximum(spec_x, floor * spec_x.max())

        # reflected Gaussian on ny rows: the DCT-II diagonalizes the even extension of period 2ny
        e = np.arange(2 * ny)
        e = np.minimum(e, 2 * ny - e)
        spec_y = np.fft.rfft(_gaussian(e, length)).real[:ny]
        self.spec_y = np.maximum(spec_y, floor * spec_y.max())

        basis = dct(np.eye(ny), axis=0, norm="ortho")
        diag_y = (basis ** 2 * self.spec_y[:, None]).sum(axis=0)
        diag_x = self.spec_x[0] + 2 * self.spec_x[1:(nx + 1) // 2].sum()
        if nx % 2 == 0:
            diag_x += self.spec_x[-1]
        diag_x /= nx
        self.diag = (diag_x * diag_y)[None, :, None]

        self.layer = np.array([[1.0, layer_correlation], [layer_correlation, 1.0]])
        self.layer_chol = np.linalg.cholesky(self.layer)
        self.layer_inv = np.linalg.inv(self.layer)

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != self.shape:
            raise ShapeError(f"Covariance operand must have shape {self.shape}, got {v.shape}")
        return v

    def _spectral(self, v: np.ndarray, power: float) -> np.ndarray:
        nx = self.shape[2]
        v = irfft(rfft(v, axis=-1) * self.spec_x ** power, n=nx, axis=-1)
        v = dct(v, axis=-2, norm="ortho") * (self.spec_y ** power)[:, None]
        return idct(v, axis=-2, norm="ortho")

    @staticmethod
    def _layers(matrix: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("lm,myx->lyx", matrix, v)

    def apply(self, v: np.ndarray) -> np.ndarray:
        scale = 1.0 / np.sqrt(self.diag)
        v = self._check(v) * scale
        return self._spectral(self._layers(self.layer, v), 1.0) * scale

    def apply_sqrt(self, chi: np.ndarray) -> np.ndarray:
        chi = self._check(chi)
        return self._spectral(self._layers(self.layer_chol, chi), 0.5) / np.sqrt(self.diag)

    def apply_sqrt_T(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v) / np.sqrt(self.diag)
        return self._layers(self.layer_chol.T, self._spectral(v, 0.5))

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        scale = np.sqrt(self.diag)
        v = self._check(v) * scale
        return self._spectral(self._layers(self.layer_inv, v), -1.0) * scale


class IdentityCorrelation:
    """Identity correlation on vectors of a fixed length."""

    def __init__(self, n: int):
        self.shape = (n,)

    def _check(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != self.shape:
            raise ShapeError(f"Covariance operand must have shape {self.shape}, got {v.shape}")
        return v

    def apply(self, v):
        return self._check(v).copy()

    apply_sqrt = apply
    apply_sqrt_T = apply
    apply_inv = apply


class Covariance:
    """σ² times a correlation operator."""

    def __init__(self, std: float, correlation: GaussianCorrelation | IdentityCorrelation):
        self.std = std
        self.correlation = correlation

    @property
    def shape(self) -> tuple[int, ...]:
        return self.correlation.shape

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.std ** 2 * self.correlation.apply(v)

    def apply_sqrt(self, chi: np.ndarray) -> np.ndarray:
        return self.std * self.correlation.apply_sqrt(chi)

    def apply_sqrt_T(self, v: np.ndarray) -> np.ndarray:
        return self.std * self.correlation.apply_sqrt_T(v)

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        return self.correlation.apply_inv(v) / self.std ** 2

    def norm2(self, v: np.ndarray) -> float:
        """Squared Mahalanobis norm vᵀ A⁻¹ v."""
        return float(np.vdot(v, self.apply_inv(v)))


@dataclass(frozen=True)
class Covariances:
    B: Covariance
    Q: Covariance
    P: Covariance

    @classmethod
    def build(cls, cfg: CovarianceConfig, nx: int, ny: int, n_params: int) -> "Covariances":
        short = GaussianCorrelation(nx, ny, cfg.short_length, cfg.layer_correlation, cfg.spectral_floor)
        long = GaussianCorrelation(nx, ny, cfg.long_length, cfg.layer_correlation, cfg.spectral_floor)
        return cls(
            B=Covariance(cfg.b, short),
            Q=Covariance(cfg.q, long),
            P=Covariance(cfg.p, IdentityCorrelation(n_params)),
        )


# -- observation network --------------------------------------------------


@dataclass(frozen=True)
class ObsNetwork:
    """Fixed observation locations in fractional grid coordinates and their cadence."""
    x: np.ndarray
    y: np.ndarray
    layer: np.ndarray
    interval_seconds: float = 2 * HOUR
    first_offset_seconds: float = HOUR
    window_seconds: float = DAY

    def __post_init__(self):
        if not (self.x.shape == self.y.shape == self.layer.shape) or self.x.ndim != 1:
            raise ShapeError("Observation network arrays must be 1-D and of equal length")
        if np.any((self.layer != 0) & (self.layer != 1)):
            raise DataError("Observation layers must be 0 or 1")

    @property
    def size(self) -> int:
        return self.x.size

    @property
    def offsets(self) -> np.ndarray:
        """Batch times within a window, in seconds."""
        return np.arange(self.first_offset_seconds, self.window_seconds, self.interval_seconds)

    @classmethod
    def quasi_random(cls, nx: int, ny: int, n: int = 30) -> "ObsNetwork":
        """Unscrambled Halton points over the channel interior, layers alternating."""
        sampler = qmc.Halton(d=2, scramble=False)
        sampler.fast_forward(1)
        h = sampler.random(n)
        return cls(nx * h[:, 0], 1.0 + (ny - 2) * h[:, 1], np.arange(n) % 2)

    @classmethod
    def from_csv(cls, path: str | Path = DEFAULT_NETWORK) -> "ObsNetwork":
        rows = read_table(path, NETWORK_HEADER)
        try:
            rows.sort(key=lambda r: int(r["location_id"]))
            return cls(
                np.array([float(r["x"]) for r in rows]),
                np.array([float(r["y"]) for r in rows]),
                np.array([int(r["layer"]) for r in rows]),
            )
        except ValueError as e:
            raise DataError(f"Bad observation network entry: {e}", str(path))

    def to_csv(self, path: str | Path) -> Path:
        rows = [(k, self.x[k], self.y[k], int(self.layer[k])) for k in range(self.size)]
        return write_table(path, NETWORK_HEADER, rows)


class ObservationOperator:
    """Bilinear interpolation of ψ at the network locations, each on its own layer."""

    def __init__(self, network: ObsNetwork, nx: int, ny: int):
        x, y = network.x, network.y
        if np.any((x < 0) | (x >= nx) | (y < 0) | (y > ny - 1)):
            raise DataError(f"Observation location outside [0,{nx})x[0,{ny - 1}]")
        self.network = network
        self.shape = (2, ny, nx)
        self.layer = network.layer.astype(np.int64)
        self.i0 = np.floor(x).astype(np.int64)
        self.i1 = (self.i0 + 1) % nx
        self.a = x - self.i0
        self.j0 = np.minimum(np.floor(y).astype(np.int64), ny - 2)
        self.b = y - self.j0

    def apply(self, psi: np.ndarray) -> np.ndarray:
        psi = np.asarray(psi)
        if psi.shape != self.shape:
            raise ShapeError(f"State must have shape {self.shape}, got {psi.shape}")
        l, a, b = self.layer, self.a, self.b
        return (
            (1 - a) * (1 - b) * psi[l, self.j0, self.i0]
            + a * (1 - b) * psi[l, self.j0, self.i1]
            + (1 - a) * b * psi[l, self.j0 + 1, self.i0]
            + a * b * psi[l, self.j0 + 1, self.i1]
        )

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.network.size,):
            raise ShapeError(f"Expected {self.network.size} observation values, got {values.shape}")
        out = np.zeros(self.shape)
        l, a, b = self.layer, self.a, self.b
        np.add.at(out, (l, self.j0, self.i0), (1 - a) * (1 - b) * values)
        np.add.at(out, (l, self.j0, self.i1), a * (1 - b) * values)
        np.add.at(out, (l, self.j0 + 1, self.i0), (1 - a) * b * values)
        np.add.at(out, (l, self.j0 + 1, self.i1), a * b * values)
        return out


@dataclass(frozen=True)
class ObsBatch:
    time_offset: float
    values: np.ndarray
    error_std: float


@dataclass
class WindowObservations:
    window_start: float
    batches: list[ObsBatch] = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(batch.values.size for batch in self.batches)


def _check_offset(network: ObsNetwork, offset: float) -> None:
    if not np.any(np.isclose(network.offsets, offset, rtol=0.0, atol=1e-6)):
        raise WindowError(f"t0+{offset} s is not an observation time of the network")


def observe(
    state: QGState, operator: ObservationOperator, t: float, window_start: float = 0.0,
    error_std: float = 0.0,
) -> ObsBatch:
    """Model-predicted observation batch H_k(x) at time t."""
    _check_offset(operator.network, t - window_start)
    return ObsBatch(t - window_start, operator.apply(state.psi), error_std)


def simulate_observations(
    truth: list[QGState], operator: ObservationOperator, seed: int, error_std: float,
    window_start: float = 0.0,
) -> WindowObservations:
    """
    Noisy observations y_k = H_k(x_k) + ε_k from truth states at the batch times of one window.

    Raises:
        WindowError: If the truth states are not exactly at the batch times
    """
    network = operator.network
    offsets = network.offsets
    if len(truth) != offsets.size:
        raise WindowError(f"Expected {offsets.size} truth states, got {len(truth)}")
    rng = np.random.default_rng(seed)
    obs = WindowObservations(window_start)
    for state, offset in zip(truth, offsets):
        if abs(state.valid_time - window_start - offset) > 1e-6:
            raise WindowError(f"Truth state at t={state.valid_time} does not match batch t0+{offset}")
        noise = rng.normal(0.0, error_std, size=network.size) if error_std > 0 else 0.0
        obs.batches.append(ObsBatch(offset, operator.apply(state.psi) + noise, error_std))
    return obs


def write_observations(
    path: str | Path, windows: list[WindowObservations], network: ObsNetwork, epoch: datetime,
) -> Path:
    rows = []
    for window in windows:
        for batch in window.batches:
            stamp = (epoch + timedelta(seconds=window.window_start + batch.time_offset)).isoformat()
            for k, value in enumerate(batch.values):
                rows.append((stamp, k, int(network.layer[k]), value, batch.error_std))
    return write_table(path, OBS_HEADER, rows)


def read_observations(
    path: str | Path, network: ObsNetwork, epoch: datetime,
) -> dict[float, WindowObservations]:
    """Observation windows keyed by window start (seconds since epoch)."""
    rows = read_table(path, OBS_HEADER)
    by_time: dict[float, dict[int, tuple[float, float]]] = {}
    try:
        for row in rows:
            t = (datetime.fromisoformat(row["time"]) - epoch).total_seconds()
            by_time.setdefault(t, {})[int(row["location_id"])] = (
                float(row["value"]), float(row["error_std"])
            )
    except ValueError as e:
        raise DataError(f"Bad observation record: {e}", str(path))

    windows: dict[float, WindowObservations] = {}
    for t in sorted(by_time):
        records = by_time[t]
        if sorted(records) != list(range(network.size)):
            raise DataError(f"Incomplete observation batch at t={t}", str(path))
        start = np.floor(t / network.window_seconds) * network.window_seconds
        values = np.array([records[k][0] for k in range(network.size)])
        window = windows.setdefault(start, WindowObservations(start))
        window.batches.append(ObsBatch(t - start, values, records[0][1]))
    for window in windows.values():
        if len(window.batches) != network.offsets.size:
            raise DataError(f"Window at t={window.window_start} has {len(window.batches)} batches", str(path))
    return windows
