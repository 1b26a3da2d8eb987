"""Synthetic processes, regret evaluation and the replication engine."""

from .benchmark import BenchmarkResult, aggregate, replication_seeds, run_benchmark, run_replication
from .dgp import (DEFAULT_SIGMA, DgpSpec, Simulation, generate_dgp, generate_iv_dgp,
                  generate_simple_semisynthetic)
from .regret import RegretReport, evaluate_regret, rmse

__all__ = [
    "BenchmarkResult",
    "aggregate",
    "replication_seeds",
    "run_benchmark",
    "run_replication",
    "DEFAULT_SIGMA",
    "DgpSpec",
    "Simulation",
    "generate_dgp",
    "generate_iv_dgp",
    "generate_simple_semisynthetic",
    "RegretReport",
    "evaluate_regret",
    "rmse",
]
