"""Problem container shared by solvers, oracles, and the harness."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NonFiniteError
from .linalg import DenseMatrix


@dataclass
class ProblemInstance:
    """An lp regression instance min_x ||A x - b||_p at target accuracy eps.

    Exponents in (1, 2) select the lq path; math.inf selects minimax.
    ``planted_x`` is an optional generator hint used only by tests.
    """

    A: DenseMatrix
    b: np.ndarray
    p: float
    eps: float = 1e-6
    planted_x: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.b.shape != (self.A.n,):
            raise InvalidInputError("b must have length n")
        if not np.all(np.isfinite(self.b)):
            raise NonFiniteError("b must be finite")
        if self.p <= 1:
            raise InvalidInputError("exponent must exceed 1")
        if not 0 < self.eps < 1:
            raise InvalidInputError("eps must lie in (0, 1)")

    def residual_norm(self, x: np.ndarray) -> float:
        r = self.A.a @ x - self.b
        if self.p == math.inf:
            return float(np.max(np.abs(r))) if r.size else 0.0
        return pnorm(r, self.p)


def pnorm(u: np.ndarray, p: float) -> float:
    """Overflow-safe ||u||_p."""
    u = np.asarray(u, dtype=float)
    if p == math.inf:
        return float(np.max(np.abs(u))) if u.size else 0.0
    m = float(np.max(np.abs(u))) if u.size else 0.0
    if m == 0.0:
        return 0.0
    return m * float(np.sum((np.abs(u) / m) ** p)) ** (1.0 / p)
