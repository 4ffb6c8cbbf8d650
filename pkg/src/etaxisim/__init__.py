"""Deterministic multi-agent simulator of an electric-taxi dial-a-ride fleet.

Public surface: scenario configuration, the closed-loop Simulation, metrics
reduction, batch sweeps with trend checks, figure rendering, and the live
control gateway.
"""

from .errors import (CalibrationError, CommandError, ConfigError,
                     PairingError, SimulationError, SpecError, StrandedError,
                     TargetError)
from .metrics import MetricsReport, convergence_point, ingest, trend_stats
from .scenario import ScenarioConfig, SweepSpec
from .simulation import Simulation
from .experiments import (SweepResult, calibrate_defaults, check_trends,
                          load_rows, run_sweep)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError", "CommandError", "ConfigError", "PairingError",
    "SimulationError", "SpecError", "StrandedError", "TargetError",
    "MetricsReport", "convergence_point", "ingest", "trend_stats",
    "ScenarioConfig", "SweepSpec", "Simulation",
    "SweepResult", "calibrate_defaults", "check_trends", "load_rows",
    "run_sweep", "__version__",
]
