"""Row-weight computations that tie the lp geometry of A to an ellipse.

Two families are provided: overestimates for p >= 2 (averaged fixed-point
iterates, certified by an exact leverage recomputation) and regularized
weights for q <= 2 (a contractive map).  An exact fixed-point oracle for
2 <= p < 4 is included for tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DominationFailure,
    InvalidInputError,
    NegativeWeightError,
    NoConvergenceError,
)
from .linalg import DenseMatrix, SolveCounter, approx_lev, leverage_scores, reweighted

WEIGHT_FLOOR = 1e-14
DOMINATION_TOL = 1e-8


def inv_exponent(p: float) -> float:
    """1/p, with p = inf handled as 0."""
    if p == math.inf:
        return 0.0
    if p < 1:
        raise InvalidInputError("exponent must be >= 1")
    return 1.0 / p


def half_minus_inv(p: float) -> float:
    return 0.5 - inv_exponent(p)


def reweight_by(A: DenseMatrix, w: np.ndarray, expo: float) -> DenseMatrix:
    """diag(w^expo) @ A with the weight floor applied first."""
    wf = np.maximum(np.asarray(w, dtype=float), WEIGHT_FLOOR)
    return reweighted(A, wf ** expo)


@dataclass
class LewisOverestimate:
    """Weights dominating their own reweighted leverage scores, mass in [d, 2d]."""

    weights: np.ndarray
    p: float

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))


@dataclass
class RegularizedLewisWeights:
    """Approximate fixed point of w_i = sigma((C+W)^{1/2-1/q} A)_i."""

    weights: np.ndarray
    regularizer: np.ndarray
    q: float


def lewis_overestimates(A: DenseMatrix, p: float, seed=0,
                        counter: SolveCounter | None = None) -> LewisOverestimate:
    """Compute lp weight overestimates for p >= 2 (p = inf allowed).

    Runs T = ceil(10 log n) rounds of approximate leverage scores on the
    reweighted matrix, starting from the uniform vector d/n, and returns
    3/(2T) times the iterate sum.  The certificate (mass in [d, 2d] and
    elementwise domination) is re-verified with one exact leverage
    computation; failure raises DominationFailure, which signals a sketch
    failure and is retryable with a fresh seed.
    """
    if p < 2:
        raise InvalidInputError("overestimates require p >= 2")
    n, d = A.n, A.d
    expo = half_minus_inv(p)
    rng = np.random.default_rng(seed)
    T = int(math.ceil(10 * math.log(max(n, 2))))
    w = np.full(n, d / n)
    acc = np.zeros(n)
    for _ in range(T):
        w = approx_lev(reweight_by(A, w, expo), 0.1, seed=rng, counter=counter)
        acc += w
    out = (3.0 / (2.0 * T)) * acc

    mass = float(np.sum(out))
    sig = leverage_scores(reweight_by(A, out, expo))
    if not (d - 1e-9 <= mass <= 2 * d + 1e-9) or np.any(out + DOMINATION_TOL < sig):
        raise DominationFailure(
            f"certificate failed: mass={mass:.6g}, worst margin="
            f"{float(np.min(out - sig)):.3g}")
    return LewisOverestimate(out, p)


def norm_sandwich_check(A: DenseMatrix, w: LewisOverestimate, x: np.ndarray):
    """Evaluate the three norms of the weighted sandwich at x.

    Returns (lp, weighted_l2, upper) where lp = ||Ax||_p, weighted_l2 is
    the W^{1/2-1/p}-reweighted Euclidean norm, and upper is the Holder
    bound mass^{1/2-1/p} ||Ax||_p.  The caller asserts
    lp <= weighted_l2 <= upper.
    """
    p = w.p
    ax = A.a @ np.asarray(x, dtype=float)
    if p == math.inf:
        lp = float(np.max(np.abs(ax)))
    else:
        lp = float(np.linalg.norm(ax, p))
    expo = half_minus_inv(p)
    wf = np.maximum(w.weights, WEIGHT_FLOOR)
    weighted = float(np.linalg.norm((wf ** expo) * ax))
    upper = float(w.mass ** expo * lp)
    return lp, weighted, upper


def reg_lewis_update(A: DenseMatrix, w: np.ndarray, c: np.ndarray, q: float,
                     sigma: np.ndarray | None = None) -> np.ndarray:
    """One step of the contractive map for c-regularized weights.

    The update is (c+w)^{1-q/2} (sigma+c)^{q/2} - c; for large c that
    subtraction cancels catastrophically, so it is evaluated through
    expm1/log1p, which also keeps the result nonnegative.
    """
    base = np.maximum(c + w, WEIGHT_FLOOR)
    if sigma is None:
        sigma = leverage_scores(reweighted(A, base ** (0.5 - 1.0 / q)))
    pos = c > 0
    nxt = np.empty_like(base)
    with np.errstate(divide="ignore"):
        cpos = c[pos]
        t = ((1.0 - q / 2.0) * np.log1p(np.maximum(w[pos], 0.0) / cpos)
             + (q / 2.0) * np.log1p(sigma[pos] / cpos))
        nxt[pos] = cpos * np.expm1(t)
        free = ~pos
        nxt[free] = (np.maximum(w[free], WEIGHT_FLOOR) ** (1.0 - q / 2.0)
                     * sigma[free] ** (q / 2.0))
    low = float(np.min(nxt))
    if low < -1e-12:
        raise NegativeWeightError(f"update produced weight {low:.3g}")
    return np.maximum(nxt, 0.0)


def reg_lewis(A: DenseMatrix, c: np.ndarray, q: float, seed=0,
              counter: SolveCounter | None = None) -> RegularizedLewisWeights:
    """Approximate c-regularized lq weights for q in (1, 2].

    Starts from the all-ones vector and applies ceil(8 log log n) + 4
    contraction steps, each powered by approximate leverage scores at
    eps = 1/50; the returned vector is the approximate leverage scores
    of the final reweighted matrix.
    """
    if not 1 < q <= 2:
        raise InvalidInputError("q must lie in (1, 2]")
    c = np.asarray(c, dtype=float)
    if np.any(c < 0):
        raise InvalidInputError("regularizer must be nonnegative")
    n = A.n
    rng = np.random.default_rng(seed)
    T = int(math.ceil(8 * math.log(math.log(max(n, 3))))) + 4
    w = np.ones(n)
    for _ in range(T):
        sig = approx_lev(reweight_by(A, c + w, 0.5 - 1.0 / q), 1.0 / 50.0,
                         seed=rng, counter=counter)
        w = reg_lewis_update(A, w, c, q, sigma=sig)
    final = approx_lev(reweight_by(A, c + w, 0.5 - 1.0 / q), 1.0 / 50.0,
                       seed=rng, counter=counter)
    return RegularizedLewisWeights(final, c, q)


def reg_lewis_residual(A: DenseMatrix, rw: RegularizedLewisWeights):
    """Self-consistency of returned weights against the fixed-point map.

    Returns (max_rel_residual, ratio_lo, ratio_hi) where the residual is
    max_i |w_i - sigma_i| / (w_i + c_i) and the ratios compare
    sigma_i + c_i against w_i + c_i.
    """
    w, c, q = rw.weights, rw.regularizer, rw.q
    sig = leverage_scores(reweight_by(A, c + w, 0.5 - 1.0 / q))
    denom = np.maximum(w + c, WEIGHT_FLOOR)
    rel = float(np.max(np.abs(w - sig) / denom))
    ratio = (sig + c) / denom
    return rel, float(np.min(ratio)), float(np.max(ratio))


def exact_lewis_oracle(A: DenseMatrix, p: float, tol: float = 1e-10,
                       max_iter: int = 10000) -> np.ndarray:
    """Fixed point of w_i = sigma(W^{1/2-1/p} A)_i, for 2 <= p < 4.

    Test-only oracle: iterates w <- (a_i^T (A^T W^{1-2/p} A)^{-1} a_i)^{p/2}
    until the self-consistency residual drops below tol.  The map is also
    contractive for p in (1, 2), which the q-side tests rely on.
    """
    if not 1 < p < 4:
        raise InvalidInputError("fixed-point oracle requires p in (1, 4)")
    n = A.n
    w = leverage_scores(A)
    for _ in range(max_iter):
        sig = leverage_scores(reweight_by(A, w, half_minus_inv(p)))
        wf = np.maximum(w, WEIGHT_FLOOR)
        # sigma_i = w_i^{1-2/p} * quad_i, so quad_i^{p/2} = (sigma_i * w_i^{2/p-1})^{p/2}
        nxt = (sig * wf ** (2.0 / p - 1.0)) ** (p / 2.0)
        if float(np.max(np.abs(w - sig))) <= tol:
            return w
        w = nxt
    raise NoConvergenceError(f"no fixed point after {max_iter} iterations")


def lewis_residual(A: DenseMatrix, w: np.ndarray, p: float) -> float:
    """sup-norm self-consistency residual of w against the fixed-point map."""
    sig = leverage_scores(reweight_by(A, w, half_minus_inv(p)))
    return float(np.max(np.abs(w - sig)))
