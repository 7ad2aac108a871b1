"""Discrete-event simulator of task-parallel stencil runs with failures,
checkpointing and two rollback recovery strategies."""

from .config import SimConfig, format_config, parse_config, validate
from .errors import ConfigError, DeadlockError, IntegrityError
from .metrics import RunSummary, compare, summarize
from .runtime import Simulation, fairness_report, run_simulation
from .stencil import GridSpec, StencilKernel, TaskId, tc_tiling

__all__ = [
    "ConfigError", "DeadlockError", "GridSpec", "IntegrityError",
    "RunSummary", "SimConfig", "Simulation", "StencilKernel", "TaskId",
    "compare", "fairness_report", "format_config", "parse_config",
    "run_simulation", "summarize", "tc_tiling", "validate",
]
