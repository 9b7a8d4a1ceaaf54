"""Risk-aware branch model predictive control for intersection driving."""

from .core import (
    AugmentedState,
    ControlInput,
    ProbabilityVector,
    SolveResult,
    SolverSettings,
    TrajectoryTree,
    VehicleState,
    build_tree,
    rollout,
)
from .risk import AmbiguitySet, ascent_step, cvar_value, project
from .solver import solve

__all__ = [
    "AmbiguitySet",
    "AugmentedState",
    "ControlInput",
    "ProbabilityVector",
    "SolveResult",
    "SolverSettings",
    "TrajectoryTree",
    "VehicleState",
    "ascent_step",
    "build_tree",
    "cvar_value",
    "project",
    "rollout",
    "solve",
]

__version__ = "0.1.0"
