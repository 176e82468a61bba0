"""Stochastic cell transmission models with acceptable-design estimation."""

from .network import (
    Route,
    TrafficNetwork,
    TurningFractions,
    DensityState,
    FlowRecord,
    NetworkError,
    update_density,
    aggregate_inflows,
    total_mass,
)
from .cells import CellSpec, MultiPopRoundabout, sending, receiving
from .signals import SignalSchedule, SignalState, advance_signal
from .solvers import (
    LocalProblem,
    InteractionRule,
    SimulationEngine,
    solve_dpf,
    solve_cpf,
    solve_priority,
    solve_cooperative,
)
from .env import FrankCopula, ArSourceSink, GaussianSourceSink, clamp_net_flow
from .evaluation import (
    Utility,
    BenchmarkSpec,
    calibrate_threshold,
    sequential_mc,
    bayesian_sequential_mc,
)
from .gpr import Kernel, GprDataset, GprPosterior, posterior, fit_hyperparameters
from .learning import (
    DesignSpace,
    LoopConfig,
    SobolStream,
    LevelSetEstimate,
    run_active_learning,
)

__version__ = "0.1.0"
