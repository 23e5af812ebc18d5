"""
Dense neural network with tangent-linear and adjoint operators.

Weights are a single flat vector so that they can be part of a 4D-Var
control vector. The layout is, layer by layer, the weight matrix of shape
(out, in) in row-major order followed by the bias vector.

All operators are batched: an input of shape (n, in) is processed in one
pass and a 1-D input is treated as n = 1.
"""

import logging
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pynn4dvar.exceptions import NumericalError, SerializationError, ShapeError
from pynn4dvar.serialization import Checkpoint, format_float

logger = logging.getLogger(__name__)

Activation = Literal["tanh", "linear"]

N_PREDICTORS = 4
N_PREDICTANDS = 2


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_in: int = Field(gt=0)
    n_out: int = Field(gt=0)
    activation: Activation = "tanh"

    @property
    def n_params(self) -> int:
        return self.n_in * self.n_out + self.n_out


class NetSpec(BaseModel):
    """Layer widths and activations of a dense network."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: tuple[LayerSpec, ...] = (
        LayerSpec(n_in=4, n_out=16, activation="tanh"),
        LayerSpec(n_in=16, n_out=16, activation="tanh"),
        LayerSpec(n_in=16, n_out=2, activation="linear"),
    )

    @model_validator(mode="after")
    def _widths_chain(self) -> "NetSpec":
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ValueError(f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}")
        return self

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def describe(self) -> str:
        """Compact text form, e.g. '4x16:tanh,16x16:tanh,16x2:linear'."""
        return ",".join(f"{l.n_in}x{l.n_out}:{l.activation}" for l in self.layers)

    @classmethod
    def parse(cls, text: str) -> "NetSpec":
        try:
            layers = []
            for item in text.split(","):
                widths, activation = item.split(":")
                n_in, n_out = widths.split("x")
                layers.append(LayerSpec(n_in=int(n_in), n_out=int(n_out), activation=activation))
            return cls(layers=tuple(layers))
        except ValueError as e:
            raise SerializationError(f"Bad network description {text!r}: {e}")


def unpack(spec: NetSpec, p: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into the flat weight vector, one pair per layer."""
    p = np.asarray(p, dtype=float)
    if p.shape != (spec.n_params,):
        raise ShapeError(f"Weight vector must have shape ({spec.n_params},), got {p.shape}")
    out = []
    offset = 0
    for layer in spec.layers:
        n_w = layer.n_in * layer.n_out
        w = p[offset:offset + n_w].reshape(layer.n_out, layer.n_in)
        b = p[offset + n_w:offset + n_w + layer.n_out]
        out.append((w, b))
        offset += layer.n_params
    return out


def pack(spec: NetSpec, pairs: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in pairs])


def _batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise ShapeError(f"{what} must have trailing width {width}, got shape {x.shape}")
    return x2, single


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else z


def _slope(a: np.ndarray, activation: str) -> np.ndarray | float:
    # derivative of the activation written in terms of its output
    return 1.0 - a * a if activation == "tanh" else 1.0


def _forward_trace(spec: NetSpec, p: np.ndarray, x: np.ndarray):
    pairs = unpack(spec, p)
    if not np.all(np.isfinite(p)):
        raise NumericalError("Network weights contain non-finite values")
    acts = [x]
    for (w, b), layer in zip(pairs, spec.layers):
        acts.append(_activate(acts[-1] @ w.T + b, layer.activation))
    return pairs, acts


def forward(spec: NetSpec, p: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Forward pass of the network."""
    x2, single = _batch(x, spec.n_in, "input")
    _, acts = _forward_trace(spec, p, x2)
    return acts[-1][0] if single else acts[-1]


def tl_input(spec: NetSpec, p: np.ndarray, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """Jacobian-vector product with respect to the input."""
    x2, single = _batch(x, spec.n_in, "input")
    dx2, _ = _batch(dx, spec.n_in, "input increment")
    pairs, acts = _forward_trace(spec, p, x2)
    da = dx2
    for (w, _), layer, a in zip(pairs, spec.layers, acts[1:]):
        da = _slope(a, layer.activation) * (da @ w.T)
    return da[0] if single else da


def tl_params(spec: NetSpec, p: np.ndarray, x: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Jacobian-vector product with respect to the weights."""
    x2, single = _batch(x, spec.n_in, "input")
    pairs, acts = _forward_trace(spec, p, x2)
    dpairs = unpack(spec, dp)
    da = np.zeros_like(x2)
    for (w, _), (dw, db), layer, a_prev, a in zip(pairs, dpairs, spec.layers, acts, acts[1:]):
        da = _slope(a, layer.activation) * (da @ w.T + a_prev @ dw.T + db)
    return da[0] if single else da


def _backward(spec: NetSpec, p: np.ndarray, x: np.ndarray, dyt: np.ndarray, want_params: bool):
    x2, single = _batch(x, spec.n_in, "input")
    dy2, _ = _batch(dyt, spec.n_out, "output adjoint")
    if dy2.shape[0] != x2.shape[0]:
        raise ShapeError(f"Batch sizes differ: input {x2.shape[0]}, adjoint {dy2.shape[0]}")
    pairs, acts = _forward_trace(spec, p, x2)
    grads = []
    ad = dy2
    for l in range(len(spec.layers) - 1, -1, -1):
        w, _ = pairs[l]
        adz = _slope(acts[l + 1], spec.layers[l].activation) * ad
        if want_params:
            grads.append((adz.T @ acts[l], adz.sum(axis=0)))
        ad = adz @ w
    return ad, grads[::-1], single


def ad_input(spec: NetSpec, p: np.ndarray, x: np.ndarray, dyt: np.ndarray) -> np.ndarray:
    """Adjoint of tl_input."""
    ad, _, single = _backward(spec, p, x, dyt, want_params=False)
    return ad[0] if single else ad


def ad_params(spec: NetSpec, p: np.ndarray, x: np.ndarray, dyt: np.ndarray) -> np.ndarray:
    """Adjoint of tl_params; contributions of a batch are summed."""
    _, grads, _ = _backward(spec, p, x, dyt, want_params=True)
    return pack(spec, grads)


def init_weights(spec: NetSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    pairs = []
    for layer in spec.layers:
        limit = np.sqrt(6.0 / (layer.n_in + layer.n_out))
        w = rng.uniform(-limit, limit, size=(layer.n_out, layer.n_in))
        pairs.append((w, np.zeros(layer.n_out)))
    return pack(spec, pairs)


@dataclass(frozen=True)
class Normalization:
    """Per-variable mean and standard deviation of predictors and predictands."""
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        for name in ("in_std", "out_std"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ShapeError(f"Normalization {name} must be strictly positive")

    @classmethod
    def identity(cls, n_in: int = N_PREDICTORS, n_out: int = N_PREDICTANDS) -> "Normalization":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    @classmethod
    def fit(cls, inputs: np.ndarray, outputs: np.ndarray) -> "Normalization":
        """Moments of a training set; a constant variable gets unit std."""
        in_std = inputs.std(axis=0)
        out_std = outputs.std(axis=0)
        return cls(
            inputs.mean(axis=0),
            np.where(in_std > 0, in_std, 1.0),
            outputs.mean(axis=0),
            np.where(out_std > 0, out_std, 1.0),
        )

    def normalize_inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.in_mean) / self.in_std

    def normalize_outputs(self, y: np.ndarray) -> np.ndarray:
        return (y - self.out_mean) / self.out_std

    def denormalize_outputs(self, y: np.ndarray) -> np.ndarray:
        return y * self.out_std + self.out_mean


def position_features(nx: int, ny: int) -> np.ndarray:
    """Longitude and latitude features per column, shape (ny*nx, 2), rows ordered y-major."""
    theta = np.arange(1, nx + 1)
    lam = np.arange(1, ny + 1)
    lon = np.sin(2.0 * np.pi * (theta - 0.5) / nx)
    lat = np.sin(np.pi * (lam - 0.5 - ny / 2) / ny)
    return np.stack(np.broadcast_arrays(lon[None, :], lat[:, None]), axis=-1).reshape(-1, 2)


@dataclass(frozen=True)
class ColumnCorrector:
    """
    Network applied independently to every grid column of a QG state.

    Predictors per column are (ψ₁, ψ₂, longitude feature, latitude feature)
    and predictands are the forcing (w₁, w₂). The normalization is frozen;
    only `weights` is ever a control variable.
    """
    spec: NetSpec
    weights: np.ndarray
    normalization: Normalization
    nx: int
    ny: int

    def __post_init__(self):
        if self.spec.n_in != N_PREDICTORS or self.spec.n_out != N_PREDICTANDS:
            raise ShapeError(
                f"Column corrector needs {N_PREDICTORS} inputs and {N_PREDICTANDS} outputs, "
                f"got {self.spec.n_in} and {self.spec.n_out}"
            )
        unpack(self.spec, self.weights)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def with_weights(self, weights: np.ndarray) -> "ColumnCorrector":
        return replace(self, weights=np.asarray(weights, dtype=float))

    def _columns(self, psi: np.ndarray) -> np.ndarray:
        psi = np.asarray(psi)
        if psi.shape != (2, self.ny, self.nx):
            raise ShapeError(f"State must have shape {(2, self.ny, self.nx)}, got {psi.shape}")
        return psi.reshape(2, -1).T

    def _to_state(self, cols: np.ndarray) -> np.ndarray:
        return cols.T.reshape(2, self.ny, self.nx)

    def predictors(self, psi: np.ndarray) -> np.ndarray:
        """Normalized predictors, one row per column."""
        raw = np.concatenate([self._columns(psi), position_features(self.nx, self.ny)], axis=1)
        return self.normalization.normalize_inputs(raw)

    def apply(self, psi: np.ndarray) -> np.ndarray:
        """State-shaped correction w = F(p, x)."""
        y = forward(self.spec, self.weights, self.predictors(psi))
        return self._to_state(self.normalization.denormalize_outputs(y))

    def tl_state(self, psi: np.ndarray, dpsi: np.ndarray) -> np.ndarray:
        dx = np.zeros((self.nx * self.ny, N_PREDICTORS))
        dx[:, :2] = self._columns(dpsi) / self.normalization.in_std[:2]
        dy = tl_input(self.spec, self.weights, self.predictors(psi), dx)
        return self._to_state(dy * self.normalization.out_std)

    def tl_params(self, psi: np.ndarray, dp: np.ndarray) -> np.ndarray:
        dy = tl_params(self.spec, self.weights, self.predictors(psi), dp)
        return self._to_state(dy * self.normalization.out_std)

    def ad_state(self, psi: np.ndarray, w_ad: np.ndarray) -> np.ndarray:
        dy_ad = self._columns(w_ad) * self.normalization.out_std
        dx_ad = ad_input(self.spec, self.weights, self.predictors(psi), dy_ad)
        return self._to_state(dx_ad[:, :2] / self.normalization.in_std[:2])

    def ad_params(self, psi: np.ndarray, w_ad: np.ndarray) -> np.ndarray:
        dy_ad = self._columns(w_ad) * self.normalization.out_std
        return ad_params(self.spec, self.weights, self.predictors(psi), dy_ad)

    # -- checkpoint -----------------------------------------------------

    def to_checkpoint(self, time_seconds: float = 0.0, **extra: str) -> Checkpoint:
        norm = self.normalization
        means = np.concatenate([norm.in_mean, norm.out_mean])
        stds = np.concatenate([norm.in_std, norm.out_std])
        header = {
            "netspec": self.spec.describe(),
            "grid": f"{self.nx}x{self.ny}",
            "norm_mean": ",".join(format_float(v) for v in means),
            "norm_std": ",".join(format_float(v) for v in stds),
            **extra,
        }
        return Checkpoint("weights", self.weights, time_seconds, header)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "ColumnCorrector":
        try:
            spec = NetSpec.parse(checkpoint.extra["netspec"])
            nx, ny = (int(v) for v in checkpoint.extra["grid"].split("x"))
            means = np.array([float(v) for v in checkpoint.extra["norm_mean"].split(",")])
            stds = np.array([float(v) for v in checkpoint.extra["norm_std"].split(",")])
        except (KeyError, ValueError) as e:
            raise SerializationError(f"Weight checkpoint header is incomplete: {e}")
        n_in = spec.n_in
        if means.size != n_in + spec.n_out or stds.size != means.size:
            raise SerializationError("Normalization size does not match the network")
        norm = Normalization(means[:n_in], stds[:n_in], means[n_in:], stds[n_in:])
        return cls(spec, np.array(checkpoint.data, dtype=float), norm, nx, ny)


def zero_corrector(nx: int, ny: int, spec: NetSpec | None = None) -> ColumnCorrector:
    """Corrector whose output is identically zero."""
    spec = spec or NetSpec()
    return ColumnCorrector(spec, np.zeros(spec.n_params), Normalization.identity(), nx, ny)
