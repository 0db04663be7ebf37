"""Joint user association, delivery rate and precoder design for cache-enabled fog RANs."""

from .convexsolver import ConvexQcqp, LinearProgram, Solution, SolverSettings, solve_lp, solve_qcqp
from .driver import (SCHEMES, InitResult, IterateLog, RunResult, algorithm1, algorithm2_init,
                     baseline_nocache, baseline_spdc, run_scheme)
from .model import (achievable_rates, association_from_precoders, check_feasibility,
                    objective_p1, total_power)
from .scenario import (ConfigError, Scenario, ScenarioConfig, load_config, make_scenario,
                       table2_overrides)

__version__ = "0.1.0"

__all__ = [
    "ConvexQcqp", "LinearProgram", "Solution", "SolverSettings", "solve_lp", "solve_qcqp",
    "SCHEMES", "InitResult", "IterateLog", "RunResult", "algorithm1", "algorithm2_init",
    "baseline_nocache", "baseline_spdc", "run_scheme",
    "achievable_rates", "association_from_precoders", "check_feasibility", "objective_p1",
    "total_power",
    "ConfigError", "Scenario", "ScenarioConfig", "load_config", "make_scenario",
    "table2_overrides",
]
