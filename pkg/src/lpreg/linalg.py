"""Dense matrix storage, reweighted Gram solves, and leverage scores.

Every iterative solver in this package is charged in units of solves
against ``A^T D A`` for a positive diagonal ``D``; the counting lives in
:class:`SolveCounter` and every solve flows through :func:`gram_solve`
or its multi right-hand-side variant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    InvalidInputError,
    NonFiniteError,
    RankDeficientError,
    SingularGramError,
)

DEFAULT_FLOOR = 1e-300
DEFAULT_RTOL = 1e-12

# Dense random-sign sketch size is ceil(SKETCH_C * eps^-2 * log n) rows.
SKETCH_C = 8.0


class DenseMatrix:
    """A tall full-rank matrix with n >= d, validated at construction."""

    def __init__(self, entries, row_labels=None):
        a = np.asarray(entries, dtype=float)
        if a.ndim != 2:
            raise InvalidInputError("matrix must be two-dimensional")
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("matrix entries must be finite")
        n, d = a.shape
        if n < d:
            raise InvalidInputError(f"matrix must be tall: got {n} x {d}")
        if d == 0:
            raise InvalidInputError("matrix needs at least one column")
        if np.linalg.matrix_rank(a) < d:
            raise RankDeficientError("matrix does not have full column rank")
        self.a = a
        self.row_labels = list(row_labels) if row_labels is not None else None

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.a.shape[1]

    def __repr__(self):
        return f"DenseMatrix({self.n}x{self.d})"


@dataclass
class DiagonalWeights:
    """Nonnegative per-row weights with a strictly positive solve floor."""

    values: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("weights must be finite")
        if np.any(self.values < 0):
            raise InvalidInputError("weights must be nonnegative")
        if self.floor <= 0:
            raise InvalidInputError("floor must be positive")

    def clamped(self) -> np.ndarray:
        """Values with the floor applied, as used inside a Gram solve."""
        return np.maximum(self.values, self.floor)

    @classmethod
    def ones(cls, n: int) -> "DiagonalWeights":
        return cls(np.ones(n))

    @classmethod
    def trusted(cls, values: np.ndarray,
                floor: float = DEFAULT_FLOOR) -> "DiagonalWeights":
        """Skip validation for values produced by nonnegative arithmetic."""
        obj = object.__new__(cls)
        obj.values = values
        obj.floor = floor
        return obj


@dataclass
class SolveCounter:
    """Monotone tally of Gram solves and sketch applications."""

    gram_solves: int = 0
    sketch_applications: int = 0
    by_phase: dict = field(default_factory=dict)

    def tick(self, k: int = 1, phase: str | None = None):
        self.gram_solves += k
        if phase is not None:
            self.by_phase[phase] = self.by_phase.get(phase, 0) + k


def _factor_gram(gram: np.ndarray, d: int):
    """Cholesky with a Tikhonov fallback; raises SingularGramError if both fail."""
    try:
        return cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    lam = 1e-12 * np.trace(gram) / d
    if not np.isfinite(lam) or lam <= 0:
        raise SingularGramError("Gram matrix has nonpositive trace")
    try:
        return cho_factor(gram + lam * np.eye(d), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularGramError("Gram factorization failed") from exc


def gram_solve_multi(A: DenseMatrix, D: DiagonalWeights, rhs: np.ndarray,
                     rtol: float = DEFAULT_RTOL,
                     counter: SolveCounter | None = None,
                     phase: str | None = None,
                     quality: dict | None = None) -> np.ndarray:
    """Solve (A^T D A) X = rhs for a matrix of right-hand sides.

    One factorization is shared across columns; each column is counted
    as one Gram solve.  A few steps of iterative refinement push the
    relative residual of each column down to ``rtol`` when conditioning
    permits.  When ``quality`` is supplied, the final residual matrix is
    stored under ``"residual"`` so callers can bound derived quantities.
    """
    rhs = np.asarray(rhs, dtype=float)
    single = rhs.ndim == 1
    B = rhs[:, None] if single else rhs
    if not np.all(np.isfinite(B)):
        raise NonFiniteError("right-hand side must be finite")
    a = A.a
    dvals = D.clamped()
    gram = (a * dvals[:, None]).T @ a
    if not np.all(np.isfinite(gram)):
        raise NonFiniteError("Gram matrix overflowed")
    fac = _factor_gram(gram, A.d)

    X = cho_solve(fac, B, check_finite=False)
    # Fixed-precision iterative refinement against the unregularized Gram.
    bnorm = np.linalg.norm(B, axis=0)
    bnorm[bnorm == 0.0] = 1.0
    R = B - gram @ X
    for _ in range(25):
        rel = np.linalg.norm(R, axis=0) / bnorm
        if np.all(rel <= rtol):
            break
        corr = cho_solve(fac, R, check_finite=False)
        Xn = X + corr
        Rn = B - gram @ Xn
        if np.linalg.norm(Rn) >= np.linalg.norm(R):
            break
        X, R = Xn, Rn
    if quality is not None:
        quality["residual"] = R[:, 0] if single else R
        # SPD: entries are bounded by the largest diagonal element
        quality["gram_scale"] = A.d * float(np.max(np.diagonal(gram)))
    if counter is not None:
        counter.tick(B.shape[1], phase)
    return X[:, 0] if single else X


def gram_solve(A: DenseMatrix, D: DiagonalWeights, rhs: np.ndarray,
               rtol: float = DEFAULT_RTOL,
               counter: SolveCounter | None = None,
               phase: str | None = None,
               quality: dict | None = None) -> np.ndarray:
    """Solve (A^T D A) x = rhs for a single right-hand side."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (A.d,):
        raise InvalidInputError(f"rhs must have length {A.d}")
    return gram_solve_multi(A, D, rhs, rtol=rtol, counter=counter, phase=phase,
                            quality=quality)


def leverage_scores(A: DenseMatrix) -> np.ndarray:
    """Exact leverage scores sigma_i = a_i^T (A^T A)^{-1} a_i via QR."""
    q, _ = np.linalg.qr(A.a)
    sig = np.einsum("ij,ij->i", q, q)
    return np.clip(sig, 0.0, 1.0)


def sketch_size(n: int, eps: float) -> int:
    return int(math.ceil(SKETCH_C * eps ** -2 * math.log(max(n, 2))))


def approx_lev(A: DenseMatrix, eps: float, seed=0,
               counter: SolveCounter | None = None,
               mode: str = "auto") -> np.ndarray:
    """Leverage-score estimates within a (1 +- eps) factor of the truth.

    Uses a dense random-sign projection with ceil(8 eps^-2 log n) rows,
    each applied through one Gram solve.  When the sketch would have at
    least as many rows as the matrix (always the case at small scale),
    ``mode="auto"`` falls back to the exact QR computation, which
    satisfies the estimate guarantee trivially and costs no solves.
    ``mode="sketch"`` forces the projection path.
    """
    if not 0 < eps < 1:
        raise InvalidInputError("eps must lie in (0, 1)")
    if mode not in ("auto", "sketch", "exact"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    n = A.n
    k = sketch_size(n, eps)
    if mode == "exact" or (mode == "auto" and k >= n):
        return leverage_scores(A)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    S = rng.choice([-1.0, 1.0], size=(k, n)) / math.sqrt(k)
    SA = S @ A.a                                   # k x d
    Y = gram_solve_multi(A, DiagonalWeights.ones(n), SA.T, counter=counter,
                         phase="sketch")          # d x k
    if counter is not None:
        counter.sketch_applications += k
    proj = A.a @ Y                                 # n x k, rows of S P
    est = np.einsum("ij,ij->i", proj, proj)
    return np.maximum(est, 0.0)


def reweighted(A: DenseMatrix, scale: np.ndarray) -> DenseMatrix:
    """Row-scaled copy diag(scale) @ A, revalidated."""
    return DenseMatrix(A.a * np.asarray(scale, dtype=float)[:, None])


def read_matrix(path) -> DenseMatrix:
    """Read the text format: first line "n d", then n rows of d reals."""
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 2:
        raise InvalidInputError(f"{path}: missing matrix header")
    try:
        n, d = int(tokens[0]), int(tokens[1])
        vals = [float(t) for t in tokens[2:]]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed matrix file") from exc
    if len(vals) != n * d:
        raise InvalidInputError(f"{path}: expected {n * d} entries, got {len(vals)}")
    return DenseMatrix(np.asarray(vals).reshape(n, d))


def write_matrix(path, A: DenseMatrix):
    with open(path, "w") as fh:
        fh.write(f"{A.n} {A.d}\n")
        for row in A.a:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_vector(path) -> np.ndarray:
    """Read a vector stored one value per line."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        return np.asarray([float(t) for t in tokens])
    except ValueError as exc:
        raise InvalidInputError(f"{path}: malformed vector file") from exc


def write_vector(path, v: np.ndarray):
    with open(path, "w") as fh:
        for x in np.asarray(v, dtype=float):
            fh.write(repr(float(x)) + "\n")
