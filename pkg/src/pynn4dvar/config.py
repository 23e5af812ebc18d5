"""
Run configuration.

One TOML file drives one command. The file is validated against the
RunConfig schema before any computation: unknown keys are rejected and
every error names its dotted key path.
"""

import hashlib
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import datetime
from pathlib import Path
from typing import Literal

import cbor2
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from pynn4dvar.covariances_obs import CovarianceConfig
from pynn4dvar.exceptions import ConfigError
from pynn4dvar.fourdvar import MinimizerConfig, Variant
from pynn4dvar.neural_net import NetSpec
from pynn4dvar.offline_training import AdamConfig
from pynn4dvar.qg_dynamics import QGConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    reference: QGConfig = QGConfig.reference()
    perturbed: QGConfig = QGConfig.perturbed()

    @model_validator(mode="after")
    def _same_grid(self) -> "ModelSection":
        if (self.reference.nx, self.reference.ny) != (self.perturbed.nx, self.perturbed.ny):
            raise ValueError("reference and perturbed models must share the grid")
        return self


class ObservationSection(_Section):
    network: Path | None = None  # None selects the shipped default network
    epoch: datetime = datetime(2000, 1, 1)


class ExperimentSection(_Section):
    variants: tuple[Variant, ...] = (Variant.SC,)
    total_cycles: int = Field(64, ge=0)
    spin_up_cycles: int = Field(0, ge=0)
    repetitions: int = Field(8, ge=1)
    relaxation_days: int = Field(64, ge=0)
    perturbation_std: float = Field(1.0e-2, ge=0)
    truth_days: int | None = Field(None, ge=0)
    forecast_days: int = Field(32, ge=0)
    forecast_stride: int = Field(1, ge=1)
    forecast_launches: int = Field(64, ge=0)
    correction_policy: Literal["daily", "frozen"] = "daily"
    divergence_factor: float = Field(100.0, gt=0)
    dataset_cycles: int | None = Field(None, ge=1)  # defaults to the largest training set + 1

    @model_validator(mode="after")
    def _spin_up_fits(self) -> "ExperimentSection":
        if self.spin_up_cycles > self.total_cycles:
            raise ValueError("spin_up_cycles must not exceed total_cycles")
        return self

    @property
    def kept_cycles(self) -> int:
        return self.total_cycles - self.spin_up_cycles


class TrainingSection(_Section):
    net: NetSpec = NetSpec()
    adam: AdamConfig = AdamConfig()
    dataset_variant: Variant = Variant.SC
    n_pairs: int = Field(256, ge=1)
    n_nets: int = Field(4, ge=1)
    test_pairs: int = Field(256, ge=1)
    test_seed_offset: int = 1000
    learning_curve: tuple[int, ...] = ()
    learning_curve_seeds: int = Field(3, ge=1)

    @property
    def largest_set(self) -> int:
        return max(self.n_pairs, *self.learning_curve)


class PathsSection(_Section):
    weights_dir: Path | None = None  # defaults to the output directory


class RunConfig(_Section):
    seed: int = 0
    output_dir: Path = Path("results")
    model: ModelSection = ModelSection()
    covariance: CovarianceConfig = CovarianceConfig()
    observations: ObservationSection = ObservationSection()
    minimizer: MinimizerConfig = MinimizerConfig()
    experiment: ExperimentSection = ExperimentSection()
    training: TrainingSection = TrainingSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _dataset_covers_training(self) -> "RunConfig":
        needed = self.training.largest_set + 1
        given = self.experiment.dataset_cycles
        if given is not None and given < needed:
            raise ConfigError(
                f"{given} cycles give {given - 1} increment pairs, training needs {needed - 1}",
                "experiment.dataset_cycles",
            )
        return self

    @property
    def dataset_cycles(self) -> int:
        """Cycles the dataset variant runs, so that every training set finds its pairs."""
        exp = self.experiment
        return exp.dataset_cycles if exp.dataset_cycles is not None else self.training.largest_set + 1

    def cycles_for(self, variant: Variant) -> int:
        total = self.experiment.total_cycles
        return max(total, self.dataset_cycles) if variant == self.training.dataset_variant else total

    @property
    def truth_days(self) -> int:
        exp = self.experiment
        if exp.truth_days is not None:
            return exp.truth_days
        return max(exp.total_cycles, self.dataset_cycles) + exp.forecast_days

    @property
    def weights_dir(self) -> Path:
        return self.paths.weights_dir or self.output_dir


def _key_path(loc: tuple) -> str:
    return ".".join(str(part) for part in loc)


def parse_config(data: dict) -> RunConfig:
    """
    Validate a configuration dictionary.

    Raises:
        ConfigError: With the dotted key path of the first violation
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(first["msg"], _key_path(first["loc"])) from e


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}")
    return parse_config(data)


def config_dict(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json", exclude_none=True)


def dump_config(cfg: RunConfig) -> str:
    """TOML text that load_config() parses back to an equal RunConfig."""
    return tomli_w.dumps(config_dict(cfg))


def config_sha256(cfg: RunConfig) -> str:
    """SHA-256 of the canonical CBOR encoding of the configuration."""
    return hashlib.sha256(cbor2.dumps(config_dict(cfg), canonical=True)).hexdigest()
