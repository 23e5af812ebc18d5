__version__ = "0.1.0"

from pynn4dvar import serialization
from pynn4dvar.config import RunConfig, load_config, dump_config, config_sha256
from pynn4dvar.covariances_obs import (
    CovarianceConfig,
    Covariances,
    GaussianCorrelation,
    ObsNetwork,
    ObservationOperator,
    ObsBatch,
    WindowObservations,
    observe,
    simulate_observations,
)
from pynn4dvar.exceptions import (
    NN4DVarError,
    ConfigError,
    DataError,
    ShapeError,
    WindowError,
    SerializationError,
    NumericalError,
    InversionError,
    DivergenceError,
    TrainingError,
)
from pynn4dvar.experiments import (
    ExperimentPlan,
    TruthTimeline,
    run_truth,
    run_cycled_da,
    run_forecast_suite,
    run_repetition,
    summarize_cycles,
    summarize_forecasts,
)
from pynn4dvar.fourdvar import (
    Background,
    ControlVector,
    CostReport,
    FourDVar,
    MinimizerConfig,
    Variant,
)
from pynn4dvar.neural_net import (
    ColumnCorrector,
    NetSpec,
    Normalization,
    forward,
    tl_input,
    tl_params,
    ad_input,
    ad_params,
    init_weights,
)
from pynn4dvar.offline_training import (
    AdamConfig,
    adam_train,
    build_dataset,
    evaluate_normalized_mse,
)
from pynn4dvar.qg_dynamics import (
    QGConfig,
    QGModel,
    QGState,
    PVField,
    TrajectoryTape,
    jet_initial_condition,
)

__all__ = [
    # Model
    "QGConfig",
    "QGModel",
    "QGState",
    "PVField",
    "TrajectoryTape",
    "jet_initial_condition",

    # Network
    "NetSpec",
    "Normalization",
    "ColumnCorrector",
    "forward",
    "tl_input",
    "tl_params",
    "ad_input",
    "ad_params",
    "init_weights",

    # Covariances and observations
    "CovarianceConfig",
    "Covariances",
    "GaussianCorrelation",
    "ObsNetwork",
    "ObservationOperator",
    "ObsBatch",
    "WindowObservations",
    "observe",
    "simulate_observations",

    # 4D-Var
    "Variant",
    "ControlVector",
    "Background",
    "CostReport",
    "MinimizerConfig",
    "FourDVar",

    # Training
    "AdamConfig",
    "adam_train",
    "build_dataset",
    "evaluate_normalized_mse",

    # Experiments
    "ExperimentPlan",
    "TruthTimeline",
    "run_truth",
    "run_cycled_da",
    "run_forecast_suite",
    "run_repetition",
    "summarize_cycles",
    "summarize_forecasts",

    # Configuration and I/O
    "RunConfig",
    "load_config",
    "dump_config",
    "config_sha256",
    "serialization",

    # Exceptions
    "NN4DVarError",
    "ConfigError",
    "DataError",
    "ShapeError",
    "WindowError",
    "SerializationError",
    "NumericalError",
    "InversionError",
    "DivergenceError",
    "TrainingError",
]
