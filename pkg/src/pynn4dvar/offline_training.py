"""
Offline training of the column corrector on analysis increments.

A training pair maps the analysis x^a(t) to the scaled increment of the
following cycle, (δt/ΔT)·[x^a(t+1) − x^b(t+1)], which is a proxy for the
model error accumulated over one model step. Pairs are split into samples
per grid column. The first 7/8 of the pairs (chronologically) train the
network, the last 1/8 drive early stopping.
"""

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from pynn4dvar.exceptions import DataError, TrainingError
from pynn4dvar.neural_net import (
    ColumnCorrector,
    NetSpec,
    Normalization,
    ad_params,
    forward,
    init_weights,
    position_features,
)
from pynn4dvar.qg_dynamics import QGModel, QGState
from pynn4dvar.serialization import write_table

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_mse", "validation_mse", "event")
TRAIN_FRACTION = 7 / 8


class AdamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1.0e-3, gt=0)
    batch_size: int = Field(1024, gt=0)
    max_epochs: int = Field(1024, gt=0)
    patience: int = Field(256, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1.0e-8, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _patience_below_epochs(self) -> "AdamConfig":
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        return self


class IncrementSource(Protocol):
    cycle: int
    background: np.ndarray
    analysis: np.ndarray


@dataclass(frozen=True)
class IncrementRecord:
    """Background and analysis at the start of one cycle."""
    cycle: int
    background: np.ndarray
    analysis: np.ndarray


@dataclass(frozen=True)
class TrainingPair:
    input: np.ndarray
    target: np.ndarray


@dataclass
class Dataset:
    """Normalized column samples, split chronologically."""
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    normalization: Normalization
    nx: int
    ny: int
    n_pairs: int


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_mse: float
    validation_mse: float
    event: str = ""


def scaling_factor(dt_seconds: float, window_seconds: float) -> float:
    """Fraction of a window covered by one model step, 1/72 for 20 min steps and 1-day windows."""
    return dt_seconds / window_seconds


def increment_pairs(records: Sequence[IncrementSource], n_pairs: int, scaling: float) -> list[TrainingPair]:
    """
    Pairs x^a(t) -> scaling·(x^a(t+1) - x^b(t+1)) from consecutive cycle records.

    Raises:
        DataError: If fewer than n_pairs+1 consecutive records are available
    """
    ordered = sorted(records, key=lambda r: r.cycle)
    if len(ordered) < n_pairs + 1:
        raise DataError(f"Need {n_pairs + 1} cycle records, got {len(ordered)}")
    ordered = ordered[:n_pairs + 1]
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.cycle != prev.cycle + 1:
            raise DataError(f"Cycle records are not consecutive: {prev.cycle} -> {nxt.cycle}")
    return [
        TrainingPair(np.asarray(prev.analysis), scaling * (np.asarray(nxt.analysis) - np.asarray(nxt.background)))
        for prev, nxt in zip(ordered, ordered[1:])
    ]


def column_samples(pairs: Sequence[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    """Raw predictors (ψ₁, ψ₂, lon, lat) and predictands (w₁, w₂), one row per column and pair."""
    if not pairs:
        return np.empty((0, 4)), np.empty((0, 2))
    _, ny, nx = pairs[0].input.shape
    features = position_features(nx, ny)
    xs, ys = [], []
    for pair in pairs:
        xs.append(np.concatenate([pair.input.reshape(2, -1).T, features], axis=1))
        ys.append(pair.target.reshape(2, -1).T)
    return np.concatenate(xs), np.concatenate(ys)


def build_dataset(records: Sequence[IncrementSource], n_pairs: int, scaling: float) -> Dataset:
    """Training and validation samples with normalization fitted on the training part only."""
    if n_pairs < 1:
        raise DataError("A dataset needs at least one pair")
    pairs = increment_pairs(records, n_pairs, scaling)
    n_train = max(1, int(np.floor(TRAIN_FRACTION * n_pairs)))
    train_x, train_y = column_samples(pairs[:n_train])
    val_x, val_y = column_samples(pairs[n_train:])
    norm = Normalization.fit(train_x, train_y)
    _, ny, nx = pairs[0].input.shape
    return Dataset(
        norm.normalize_inputs(train_x),
        norm.normalize_outputs(train_y),
        norm.normalize_inputs(val_x),
        norm.normalize_outputs(val_y),
        norm,
        nx,
        ny,
        n_pairs,
    )


def _mse(spec: NetSpec, p: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        return float("nan")
    return float(np.mean((forward(spec, p, x) - y) ** 2))


def adam_train(
    dataset: Dataset,
    spec: NetSpec,
    cfg: AdamConfig,
    initial: np.ndarray | None = None,
    progress: bool = False,
) -> tuple[np.ndarray, list[HistoryRow]]:
    """
    Minimize the mean-squared error with Adam and early stopping on the validation MSE.

    The best-validation weights are returned. Without a validation split
    the training MSE is monitored instead.

    Raises:
        DataError: If the dataset is empty
        TrainingError: If the loss becomes non-finite
    """
    x, y = dataset.train_x, dataset.train_y
    n = x.shape[0]
    if n == 0:
        raise DataError("Training set is empty")
    has_val = dataset.val_x.shape[0] > 0

    rng = np.random.default_rng(cfg.seed)
    p = init_weights(spec, cfg.seed) if initial is None else np.array(initial, dtype=float)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    step = 0

    best = p.copy()
    best_score = np.inf
    since_best = 0
    history = []
    epochs = tqdm(range(1, cfg.max_epochs + 1), desc="epochs", disable=not progress)
    for epoch in epochs:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            residual = forward(spec, p, xb) - yb
            grad = ad_params(spec, p, xb, 2.0 * residual / residual.size)
            step += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            m_hat = m / (1 - cfg.beta1 ** step)
            v_hat = v / (1 - cfg.beta2 ** step)
            p = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)

        train_mse = _mse(spec, p, x, y)
        val_mse = _mse(spec, p, dataset.val_x, dataset.val_y) if has_val else float("nan")
        if not np.isfinite(train_mse) or (has_val and not np.isfinite(val_mse)):
            raise TrainingError(f"Non-finite loss at epoch {epoch}")
        score = val_mse if has_val else train_mse

        event = ""
        if score < best_score:
            best, best_score, since_best = p.copy(), score, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                event = "early_stop"
        history.append(HistoryRow(epoch, train_mse, val_mse, event))
        if event:
            logger.info("Early stop at epoch %d, best score %.6e", epoch, best_score)
            break
    return best, history


def train_corrector(
    dataset: Dataset, spec: NetSpec, cfg: AdamConfig, progress: bool = False,
) -> tuple[ColumnCorrector, list[HistoryRow]]:
    weights, history = adam_train(dataset, spec, cfg, progress=progress)
    return ColumnCorrector(spec, weights, dataset.normalization, dataset.nx, dataset.ny), history


def truth_records(truth: Sequence[QGState], model: QGModel, window_seconds: float) -> list[IncrementRecord]:
    """
    Records whose analysis is the truth and whose background is the
    one-window forecast of the previous truth by `model`.
    """
    records = []
    for k in range(1, len(truth)):
        prev = truth[k - 1]
        forecast, _ = model.resolvent(prev, prev.valid_time + window_seconds, record=False)
        if abs(forecast.valid_time - truth[k].valid_time) > 1e-6:
            raise DataError("Truth checkpoints are not one window apart")
        records.append(IncrementRecord(k, forecast.psi, truth[k].psi))
    return records


def model_error_pairs(truth: Sequence[QGState], model: QGModel, window_seconds: float) -> list[TrainingPair]:
    """True model-error pairs x^t(t) -> (δt/ΔT)·[x^t(t+1) - M(x^t(t))] along a truth trajectory."""
    scaling = scaling_factor(model.cfg.dt_seconds, window_seconds)
    records = [IncrementRecord(0, truth[0].psi, truth[0].psi)] + truth_records(truth, model, window_seconds)
    return increment_pairs(records, len(records) - 1, scaling)


def evaluate_normalized_mse(corrector: ColumnCorrector, pairs: Sequence[TrainingPair]) -> float:
    """
    MSE of the corrector divided by the MSE of the zero predictor, in physical units.

    Raises:
        DataError: If there are no pairs or all targets are zero
    """
    if not pairs:
        raise DataError("Test set is empty")
    err = sum(float(np.sum((corrector.apply(p.input) - p.target) ** 2)) for p in pairs)
    ref = sum(float(np.sum(p.target ** 2)) for p in pairs)
    if ref == 0.0:
        raise DataError("Test targets are all zero")
    return err / ref


def learning_curve(
    sources: dict[str, Sequence[IncrementSource]],
    test: Sequence[TrainingPair],
    n_pairs_values: Sequence[int],
    seeds: Sequence[int],
    spec: NetSpec,
    cfg: AdamConfig,
    scaling: float,
) -> list[tuple[str, int, int, float]]:
    """Normalized test MSE for every (source, dataset length, seed)."""
    rows = []
    for name, records in sources.items():
        for n_pairs in n_pairs_values:
            dataset = build_dataset(records, n_pairs, scaling)
            for seed in seeds:
                corrector, _ = train_corrector(dataset, spec, cfg.model_copy(update={"seed": seed}))
                score = evaluate_normalized_mse(corrector, test)
                logger.info("%s N=%d seed=%d: normalized test MSE %.4f", name, n_pairs, seed, score)
                rows.append((name, n_pairs, seed, score))
    return rows


def write_history(path, history: Sequence[HistoryRow]):
    return write_table(path, HISTORY_HEADER, [(h.epoch, h.train_mse, h.validation_mse, h.event) for h in history])
