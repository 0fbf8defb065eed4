"""High-precision lp-norm regression solvers and benchmark tooling."""

from .errors import LpregError
from .linalg import (
    DenseMatrix,
    DiagonalWeights,
    SolveCounter,
    approx_lev,
    gram_solve,
    leverage_scores,
)
from .lewis import (
    LewisOverestimate,
    RegularizedLewisWeights,
    exact_lewis_oracle,
    lewis_overestimates,
    norm_sandwich_check,
    reg_lewis,
)
from .problem import ProblemInstance
from .report import SolveReport

__all__ = [
    "ProblemInstance",
    "LpregError",
    "DenseMatrix",
    "DiagonalWeights",
    "SolveCounter",
    "approx_lev",
    "gram_solve",
    "leverage_scores",
    "LewisOverestimate",
    "RegularizedLewisWeights",
    "exact_lewis_oracle",
    "lewis_overestimates",
    "norm_sandwich_check",
    "reg_lewis",
    "SolveReport",
]

__version__ = "0.1.0"
