"""Importance-weighted low-rank factorization of linear layers."""

from .errors import (
    BudgetError,
    DivergenceError,
    EmptyFilterError,
    FormatError,
    InputError,
    RankError,
    ShapeError,
    UsageError,
    WlraError,
)
from .importance import fisher_from_gradients, phi_metric, row_reduce, taylor_importance
from .linalg import FactorPair, read_matrix, svd_full, svd_truncate, truncated_svd, write_matrix
from .objective import WeightedProblem, weighted_grad, weighted_loss
from .planner import LinearLayerSpec, params_factorized, plan_uniform_ratio
from .solvers import SolverConfig, SolverTrace, factorize, solve, solve_fwsvd

__version__ = "0.1.0"
