"""Monte Carlo solvers for BSDEs, reflected BSDEs and second-order BSDEs whose
horizon is a (possibly unbounded) stopping time."""

__version__ = "0.1.0"

from .bsde import (
    AssumptionViolation,
    BackwardSolution,
    GeneratorSpec,
    OrderPreconditionError,
    PicardConfig,
    PicardDivergenceError,
    StateBins,
    TerminalSpec,
    solve_bsde,
)
from .measures import DriftControlSet, MeasureFamily
from .norms import NormParams, WindowError
from .paths import (
    Deterministic,
    ExitOfBox,
    HittingLevel,
    MinOf,
    PathBundle,
    SimConfig,
    TimeGrid,
    VolatilitySpec,
    simulate_paths,
)
from .rbsde import ObstacleSpec, ReflectedSolution, solve_rbsde
from .regression import RegressionBasis, SingularRegressionError
from .twobsde import TwoBsdeProblem, TwoBsdeSolution, solve_2bsde_hjb, solve_2bsde_sweep

__all__ = [
    "AssumptionViolation", "BackwardSolution", "Deterministic", "DriftControlSet", "ExitOfBox",
    "GeneratorSpec", "HittingLevel", "MeasureFamily", "MinOf", "NormParams", "ObstacleSpec",
    "OrderPreconditionError", "PathBundle", "PicardConfig", "PicardDivergenceError", "ReflectedSolution",
    "RegressionBasis", "SimConfig", "SingularRegressionError", "StateBins", "TerminalSpec", "TimeGrid",
    "TwoBsdeProblem", "TwoBsdeSolution", "VolatilitySpec", "WindowError", "simulate_paths", "solve_2bsde_hjb",
    "solve_2bsde_sweep", "solve_bsde", "solve_rbsde",
]
