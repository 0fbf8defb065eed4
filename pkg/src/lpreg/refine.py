"""Iterative refinement: high-accuracy lp regression from approximate steps.

Each round linearizes the p-th power objective at the current residual,
asks an approximate residual solver for a direction with a prescribed
linear progress nu, and accepts the exact line-search point along it.
A weak-duality certificate maintains a lower bound on the optimum, so
termination at (1+eps) relative accuracy is certified rather than hoped
for.  Rounds whose nu turns out infeasible for the solver shrink nu and
retry; progress is monotone throughout.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    BoostBudgetExceededError,
    BudgetExceededError,
    InfeasibleError,
    InvalidInputError,
    ZeroGradientError,
)
from .linalg import DenseMatrix, DiagonalWeights, SolveCounter, gram_solve, gram_solve_multi
from .problem import ProblemInstance, pnorm
from .report import SolveReport

REFINE_CALL_CONSTANT = 64.0
ZERO_RESIDUAL_RTOL = 1e-13


def bregman_terms(x: np.ndarray, p: float):
    """Gradient and resistance of the p-th power penalty at x.

    g_i = p |x_i|^{p-2} x_i and r_i = |x_i|^{p-2}; at p = 2 the resistance
    is identically one.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    r = ax ** (p - 2.0)
    return p * r * x, r


def scalar_refine_bounds(x: float, delta: float, p: float):
    """Sandwich for |x+d|^p - |x|^p - g d by quadratic-plus-p-power envelopes.

    Returns (lower, upper, actual); callers assert lower <= actual <= upper.
    """
    r = abs(x) ** (p - 2.0)
    g = p * r * x
    actual = abs(x + delta) ** p - abs(x) ** p - g * delta
    lower = (p / 8.0) * r * delta ** 2 + 2.0 ** (-p - 1) * abs(delta) ** p
    upper = 2.0 * p ** 2 * r * delta ** 2 + p ** p * abs(delta) ** p
    return lower, upper, actual


def line_search_lp(u: np.ndarray, w: np.ndarray, p: float,
                   max_doublings: int = 200, bisections: int = 80):
    """Minimize sum |u + c w|^p over c >= 0 by bisection on the derivative."""
    def deriv(c):
        v = u + c * w
        return float(p * (np.abs(v) ** (p - 1.0) * np.sign(v)) @ w)

    if deriv(0.0) >= 0.0:
        return 0.0, float(np.sum(np.abs(u) ** p))
    hi = 1.0
    for _ in range(max_doublings):
        if deriv(hi) >= 0.0:
            break
        hi *= 2.0
    else:
        return hi, float(np.sum(np.abs(u + hi * w) ** p))
    lo = 0.0
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        if deriv(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    c = 0.5 * (lo + hi)
    return c, float(np.sum(np.abs(u + c * w) ** p))


def lp_dual_bound(A: DenseMatrix, b: np.ndarray, x: np.ndarray, p: float,
                  constraint=None, counter: SolveCounter | None = None) -> float:
    """Certified lower bound on min ||Ax - b||_p (subject to Cx = v).

    Projects the norm-dual candidate at the current residual onto the
    feasible dual set; weak duality makes the returned value a true lower
    bound no matter how rough the candidate is.
    """
    u = A.a @ x - b
    upn = pnorm(u, p)
    if upn == 0.0:
        return 0.0
    q = p / (p - 1.0)
    m = float(np.max(np.abs(u)))
    y = (np.abs(u) / m) ** (p - 1.0) * np.sign(u)
    y /= (upn / m) ** (p - 1.0)
    ones = DiagonalWeights.ones(A.n)
    aty = A.a.T @ y
    if constraint is None:
        z = gram_solve(A, ones, aty, counter=counter, phase="certificate")
        yhat = y - A.a @ z
        num = -float(b @ yhat)
    else:
        C, v = constraint
        C = np.atleast_2d(np.asarray(C, dtype=float))
        sol = gram_solve_multi(A, ones, np.column_stack([C.T, aty]),
                               counter=counter, phase="certificate")
        JC, Jg = sol[:, :-1], sol[:, -1]
        mu = np.linalg.solve(C @ JC, C @ Jg)
        yhat = y - A.a @ (Jg - JC @ mu)
        num = float(np.asarray(v) @ mu) - float(b @ yhat)
    denom = pnorm(yhat, q)
    if denom <= 0.0 or not math.isfinite(denom):
        return 0.0
    return max(num / denom, 0.0)


@dataclass
class GammaSolverContract:
    """An approximate residual-step solver together with its quality factor.

    ``callback(nu, g, R, C, x=...)`` must return a direction with
    C @ direction = 0 and g^T (A @ direction) = -nu whose quadratic form
    and p-th power norm are within gamma (resp. gamma^{p-1}) of the best
    achievable.
    """

    gamma: float
    callback: Callable


@dataclass
class GammaCertificate:
    """A candidate direction with the two quantities its contract bounds."""

    delta: np.ndarray
    quad_value: float
    pnorm_value: float

    @classmethod
    def evaluate(cls, A: DenseMatrix, R: DiagonalWeights, p: float,
                 delta: np.ndarray) -> "GammaCertificate":
        az = A.a @ np.asarray(delta, dtype=float)
        return cls(delta=np.asarray(delta, dtype=float),
                   quad_value=float(az @ (R.values * az)),
                   pnorm_value=float(np.sum(np.abs(az) ** p)))

    def within(self, gamma: float, p: float, opt_value: float,
               rtol: float = 1e-9) -> bool:
        if opt_value < 0:
            return False
        quad_ok = self.quad_value <= gamma * opt_value * (1 + rtol)
        pn = max(self.pnorm_value, 1e-300)
        pnorm_ok = (math.log(pn) <= (p - 1.0) * math.log(gamma)
                    + math.log(max(opt_value, 1e-300)) + rtol)
        return quad_ok and pnorm_ok


@dataclass
class RefinementState:
    """Bookkeeping for one refinement run."""

    x: np.ndarray
    residual_pth: float
    lower: float = 0.0
    upper: float = math.inf
    rounds: int = 0
    gamma_calls: int = 0
    accepted: int = 0
    nu: float | None = None
    history: list = field(default_factory=list)


def constrained_l2_start(A: DenseMatrix, b: np.ndarray, constraint,
                         counter: SolveCounter | None):
    """Feasible least-squares initializer (KKT solve when constrained)."""
    ones = DiagonalWeights.ones(A.n)
    if constraint is None:
        return gram_solve(A, ones, A.a.T @ b, counter=counter, phase="init")
    C, v = constraint
    C = np.atleast_2d(np.asarray(C, dtype=float))
    v = np.asarray(v, dtype=float)
    sol = gram_solve_multi(A, ones, np.column_stack([C.T, A.a.T @ b]),
                           counter=counter, phase="init")
    JC, Jb = sol[:, :-1], sol[:, -1]
    mu = np.linalg.solve(C @ JC, C @ Jb - v)
    x = Jb - JC @ mu
    if np.linalg.norm(C @ x - v) > 1e-8 * max(1.0, np.linalg.norm(v)):
        raise InfeasibleError("constraint system has no solution")
    return x


def _reproject(x, constraint):
    if constraint is None:
        return x
    C, v = constraint
    C = np.atleast_2d(np.asarray(C, dtype=float))
    resid = np.asarray(v, dtype=float) - C @ x
    return x + C.T @ np.linalg.solve(C @ C.T, resid)


def refine_to_accuracy(instance: ProblemInstance, solver: GammaSolverContract,
                       constraint=None, counter: SolveCounter | None = None,
                       max_rounds: int = 500, max_retries: int = 80):
    """Drive the residual solver until (1+eps)-accuracy is certified.

    Returns (x, report).  Raises BudgetExceededError if the theoretical
    call budget is exhausted or progress stalls before certification,
    which signals a broken solver contract.
    """
    A, b, p, eps = instance.A, instance.b, instance.p, instance.eps
    if p < 2:
        raise InvalidInputError("refinement drives p >= 2 objectives")
    counter = counter if counter is not None else SolveCounter()
    t0 = time.perf_counter()
    n, d = A.n, A.d

    state = RefinementState(x=np.zeros(d), residual_pth=math.inf)
    if not np.any(b) and constraint is None:
        state.x = np.zeros(d)
    else:
        state.x = constrained_l2_start(A, b, constraint, counter)
    budget = min(REFINE_CALL_CONSTANT * p ** 3.5 * solver.gamma
                 * math.log((n + d) / eps), 1e18)
    C_mat = None if constraint is None else np.atleast_2d(constraint[0])

    b_scale = pnorm(b, p)
    certified = False
    for _ in range(max_rounds):
        state.rounds += 1
        u = A.a @ state.x - b
        hi = pnorm(u, p)
        state.upper = hi
        if hi <= ZERO_RESIDUAL_RTOL * max(b_scale, 1.0):
            certified = True
            break
        lb = lp_dual_bound(A, b, state.x, p, constraint=constraint,
                           counter=counter)
        state.lower = min(max(state.lower, lb), hi)
        if hi <= (1.0 + eps) * state.lower and state.lower > 0:
            certified = True
            break

        g, r = bregman_terms(u, p)
        if not np.any(g):
            break
        R = DiagonalWeights(r)
        f_cur = float(np.sum(np.abs(u) ** p))
        gap = max(f_cur - state.lower ** p, 1e-300)
        nu = gap if state.nu is None else min(gap, 4.0 * state.nu)
        moved = False
        for _ in range(max_retries):
            state.gamma_calls += 1
            if state.gamma_calls > budget:
                raise BudgetExceededError(
                    f"{state.gamma_calls} residual-solver calls exceed the "
                    f"contract budget {budget:.3g}")
            try:
                delta = solver.callback(nu, g, R, C_mat, x=state.x)
            except (InfeasibleError, BoostBudgetExceededError):
                nu /= 2.0
                continue
            except ZeroGradientError:
                break
            c_star, f_new = line_search_lp(u, A.a @ delta, p)
            if f_new < f_cur * (1.0 - 1e-15):
                state.x = _reproject(state.x + c_star * delta, constraint)
                state.nu = nu
                state.accepted += 1
                moved = True
                break
            nu /= 2.0
        if not moved:
            break

    u = A.a @ state.x - b
    hi = pnorm(u, p)
    gap = (hi / state.lower - 1.0) if state.lower > 0 else math.inf
    if hi <= ZERO_RESIDUAL_RTOL * max(b_scale, 1.0):
        certified, gap = True, 0.0
    if not certified:
        raise BudgetExceededError(
            f"stalled at relative gap {gap:.3g} (target {eps:.3g}) after "
            f"{state.rounds} rounds / {state.gamma_calls} solver calls")
    report = SolveReport(
        method="refine", p=p, eps=eps, n=n, d=d,
        gram_solves=counter.gram_solves,
        sketch_applications=counter.sketch_applications,
        phase_counts={"rounds": state.rounds, "gamma_calls": state.gamma_calls,
                      "accepted_steps": state.accepted,
                      **counter.by_phase},
        residual_lp=hi, residual_l2=float(np.linalg.norm(u)),
        certified_gap=gap, wall_time=time.perf_counter() - t0)
    return state.x, report
