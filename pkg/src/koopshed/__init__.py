"""Koopman-based one-shot under-frequency load shedding toolkit.

The package covers the full workflow: a center-of-inertia frequency
simulator for a small multi-machine grid (``gridsim``), scenario and
trajectory generation with delay-embedded measurement windows
(``dataset``), learned Koopman predictors and linear baselines
(``koopman``, ``encoders``, ``baselines``), a one-shot shed-sizing QP
with robustness margins (``control``), system-level-synthesis style
deviation bounds (``sls``), and closed-loop evaluation against a staged
conventional relay scheme (``evaluate``).  ``cli`` exposes the same
steps as a command line tool.
"""

from .gridsim import (
    ConfigError,
    FaultEvent,
    GridConfig,
    Load,
    Machine,
    SimJob,
    SimulationDiverged,
    Trajectory,
    coi_frequency,
    default_grid,
    equilibrium_state,
    simulate,
    simulate_batch,
)
from .dataset import (
    DatasetManifest,
    GenerationProtocol,
    ScenarioSpec,
    WindowError,
    build_embedding,
    generate_trajectories,
    load_manifest,
    load_split,
    sample_scenarios,
    split_and_persist,
    window_at,
    window_matrix,
)
from .koopman import (
    KoopmanModel,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    holdout_mae,
    latent_correlation,
    prediction_error_profile,
    train,
)
from .encoders import (
    ExtractorEncoder,
    MlpEncoder,
    PassthroughEncoder,
    ResConvEncoder,
    encoder_from_spec,
)
from .baselines import (
    BaselineModel,
    ConditioningError,
    EdmdDictionary,
    fit_baseline,
    fit_dmdc,
    lift,
    make_dictionary,
)
from .control import (
    ControlProblem,
    InfeasiblePlan,
    SafetyMargin,
    ShedPlan,
    empirical_min_zeta,
    kls_pipeline,
    quantization_gap_bound,
    quantize,
    quantize_ceil,
    solve_qp,
    zeta_margin,
)
from .sls import (
    NeumannDivergence,
    StackedSystem,
    SystemResponse,
    build_stacked,
    delta_operator,
    deviation_bound_check,
    neumann_sum,
    open_loop_deviation,
    response_of,
    true_response_under_identified_controller,
)
from .evaluate import (
    MetricsRow,
    UflsPolicy,
    compare,
    control_cost,
    conventional_ufls,
    safety,
    trajectory_mae,
    tune_proportion,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # gridsim
    "ConfigError", "FaultEvent", "GridConfig", "Load", "Machine",
    "SimJob", "SimulationDiverged", "Trajectory", "coi_frequency",
    "default_grid", "equilibrium_state", "simulate", "simulate_batch",
    # dataset
    "DatasetManifest", "GenerationProtocol", "ScenarioSpec",
    "WindowError", "build_embedding", "generate_trajectories",
    "load_manifest", "load_split", "sample_scenarios",
    "split_and_persist", "window_at", "window_matrix",
    # koopman
    "KoopmanModel", "TrainConfig", "TrainResult", "TrainingDiverged",
    "holdout_mae", "latent_correlation", "prediction_error_profile",
    "train",
    # encoders
    "ExtractorEncoder", "MlpEncoder", "PassthroughEncoder",
    "ResConvEncoder", "encoder_from_spec",
    # baselines
    "BaselineModel", "ConditioningError", "EdmdDictionary",
    "fit_baseline", "fit_dmdc", "lift", "make_dictionary",
    # control
    "ControlProblem", "InfeasiblePlan", "SafetyMargin", "ShedPlan",
    "empirical_min_zeta", "kls_pipeline", "quantization_gap_bound",
    "quantize", "quantize_ceil", "solve_qp", "zeta_margin",
    # sls
    "NeumannDivergence", "StackedSystem", "SystemResponse",
    "build_stacked", "delta_operator", "deviation_bound_check",
    "neumann_sum", "open_loop_deviation", "response_of",
    "true_response_under_identified_controller",
    # evaluate
    "MetricsRow", "UflsPolicy", "compare", "control_cost",
    "conventional_ufls", "safety", "trajectory_mae", "tune_proportion",
]
