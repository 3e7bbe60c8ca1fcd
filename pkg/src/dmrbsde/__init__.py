"""Numerical laboratory for BSDEs with double mean reflections.

Submodules
----------
grid         time grids, Brownian ensembles, fixed-order ensemble means
skorokhod    forward/backward two-sided Skorokhod maps with nonlinear boundaries
boundaries   loss functions and the boundaries they induce on an ensemble
condexp      regression conditional expectations, martingale/Z extraction, quadrature oracle
dmr          constant-coefficient construction and Picard solver
penalized    penalized mean-field scheme for linear obstacles
diagnostics  flat-off, constraints, Dynkin value, sandwich, stability
config, cli  scenario files and the command line
"""

from dmrbsde.errors import (
    AdmissibilityError,
    ConfigError,
    ConvergenceError,
    DmrError,
    InfeasibleBoundaries,
    InvariantViolation,
    NumericError,
    OracleUnavailable,
    RegressionError,
    TerminalConditionError,
)
from dmrbsde.grid import PathEnsemble, TimeGrid, make_grid, sample_ensemble, tree_mean, tree_sum

__version__ = "0.1.0"

__all__ = [
    "AdmissibilityError",
    "ConfigError",
    "ConvergenceError",
    "DmrError",
    "InfeasibleBoundaries",
    "InvariantViolation",
    "NumericError",
    "OracleUnavailable",
    "RegressionError",
    "TerminalConditionError",
    "PathEnsemble",
    "TimeGrid",
    "make_grid",
    "sample_ensemble",
    "tree_mean",
    "tree_sum",
]
