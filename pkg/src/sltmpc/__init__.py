"""System level tube-MPC with asynchronous tube computation.

A fast tube-fusing control process optimizes the nominal trajectory over
a bounded memory of certified tube solutions, while a slower tube
optimizer refreshes that memory; the memory update rule preserves
recursive feasibility across refreshes.
"""

from .config import ExperimentConfig, config_hash, dump_config, load_config
from .model import LtiModel, ProblemData, TerminalIngredients, terminal_ingredients
from .ocp import (
    MemoryEntry,
    ProblemSpec,
    SolveResult,
    SolverSettings,
    build_fixed_tube,
    build_primary,
    build_sltmpc,
    extract_control,
    solve,
)
from .polytope import (
    HPolytope,
    VertexSet,
    check_containment_certificate,
    contains,
    mapped_support,
    pontryagin_tighten,
    scale,
    support,
    vertices_2d,
)
from .runtime import (
    ControllerState,
    Memory,
    MemoryEvent,
    Schedule,
    primary_step,
    run_closed_loop,
    run_secondary,
    update_memory,
)
from .sim import ExperimentSetup, bench_solve_times, roa_grid, sample_disturbance, simulate
from .slp import SystemResponse, TubeSequence, tube_tightenings, validate_response

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "config_hash", "dump_config", "load_config",
    "LtiModel", "ProblemData", "TerminalIngredients", "terminal_ingredients",
    "MemoryEntry", "ProblemSpec", "SolveResult", "SolverSettings",
    "build_fixed_tube", "build_primary", "build_sltmpc", "extract_control", "solve",
    "HPolytope", "VertexSet", "check_containment_certificate", "contains",
    "mapped_support", "pontryagin_tighten", "scale", "support", "vertices_2d",
    "ControllerState", "Memory", "MemoryEvent", "Schedule",
    "primary_step", "run_closed_loop", "run_secondary", "update_memory",
    "ExperimentSetup", "bench_solve_times", "roa_grid", "sample_disturbance", "simulate",
    "SystemResponse", "TubeSequence", "tube_tightenings", "validate_response",
    "__version__",
]
