"""Accelerated proximal scheme for lp regression in the reweighted metric.

The proximal subproblem adds an e p^p times p-th power of the distance in
the metric induced by the weight overestimates.  Hessian stability makes
that subproblem conditionally well-behaved: a relative-smoothness descent
loop solves it, with each inner step reduced to a scalar root-find (one
Gram solve per probe).  The outer loop is a standard accelerated
proximal-point iteration with a step-scale search.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import (
    BisectionStallError,
    BudgetExceededError,
    InvalidInputError,
)
from .lewis import WEIGHT_FLOOR, LewisOverestimate, lewis_overestimates
from .linalg import DenseMatrix, DiagonalWeights, SolveCounter, gram_solve
from .problem import ProblemInstance, pnorm
from .refine import lp_dual_bound
from .report import SolveReport

PROX_ALPHA_SCALE = 1.0 / 128.0     # alpha = 1/(128 p^2)
INNER_RATE_CONSTANT = 64.0 * math.e ** 2
MS_BISECTION_CAP = 60
HALVING_DISTANCE_COEFF = 2.0 ** 1.5


def fpow(base: float, expo: float) -> float:
    """Float power that saturates to inf instead of raising."""
    with np.errstate(over="ignore"):
        return float(np.float64(base) ** np.float64(expo))


def reg_coefficient(p: float) -> float:
    """C_p = e p^p."""
    return math.e * p ** p


@dataclass
class ProxProblem:
    """One proximal subproblem: f(x) + C_p ||x - center||_M^p.

    The metric M = A^T W^{1-2/p} A is held through (A, weights, p) and
    never materialized.
    """

    A: DenseMatrix
    b: np.ndarray
    p: float
    weights: LewisOverestimate
    center: np.ndarray

    def __post_init__(self):
        if self.p < 2:
            raise InvalidInputError("proximal scheme requires p >= 2")
        self.cp = reg_coefficient(self.p)
        self.m_diag = np.maximum(self.weights.weights, WEIGHT_FLOOR) ** (
            1.0 - 2.0 / self.p)
        self.center = np.asarray(self.center, dtype=float)
        with np.errstate(over="ignore"):
            self._hess_center = self.p * (self.p - 1.0) * np.abs(
                self.A.a @ self.center - self.b) ** (self.p - 2.0)
        if not np.all(np.isfinite(self._hess_center)):
            raise InvalidInputError("center residuals overflow the exponent")

    def f(self, x: np.ndarray) -> float:
        with np.errstate(over="ignore"):
            return float(np.sum(np.abs(self.A.a @ x - self.b) ** self.p))

    def grad_f(self, x: np.ndarray) -> np.ndarray:
        u = self.A.a @ x - self.b
        return self.p * (self.A.a.T @ (np.abs(u) ** (self.p - 2.0) * u))

    def m_norm(self, v: np.ndarray) -> float:
        av = self.A.a @ v
        return math.sqrt(float(av @ (self.m_diag * av)))

    def m_apply(self, v: np.ndarray) -> np.ndarray:
        return self.A.a.T @ (self.m_diag * (self.A.a @ v))

    def f_reg(self, x: np.ndarray) -> float:
        return self.f(x) + self.cp * fpow(self.m_norm(x - self.center), self.p)

    def grad_f_reg(self, x: np.ndarray) -> np.ndarray:
        step = x - self.center
        dist = self.m_norm(step)
        out = self.grad_f(x)
        if dist > 0:
            out = out + self.p * self.cp * dist ** (self.p - 2.0) * self.m_apply(step)
        return out

    def m_inv_norm(self, v: np.ndarray,
                   counter: SolveCounter | None = None) -> float:
        sol = gram_solve(self.A, DiagonalWeights(self.m_diag), v,
                         counter=counter, phase="metric")
        return math.sqrt(max(float(v @ sol), 0.0))


@dataclass
class ProxCertificate:
    """Near-stationarity record for a proximal solve."""

    x: np.ndarray
    residual: float
    threshold: float
    alpha: float
    delta: float
    inner_iterations: int
    tau: float

    @property
    def satisfied(self) -> bool:
        return self.residual <= self.threshold


def _tau_step(prob: ProxProblem, glin: np.ndarray, tau: float,
              counter: SolveCounter | None):
    """Minimize <glin, x> + 4||x-y||_H^2 + 2 e p^{p+1} tau ||x-y||_M^2."""
    p = prob.p
    diag = 8.0 * prob._hess_center + 4.0 * p * prob.cp * tau * prob.m_diag
    step = gram_solve(prob.A, DiagonalWeights(diag), -glin, counter=counter,
                      phase="prox")
    return prob.center + step


def _solve_inner_subproblem(prob: ProxProblem, glin: np.ndarray, tau_seed: float,
                            counter: SolveCounter | None):
    """Pick tau >= 0 so that tau^{2/(p-2)} = ||x(tau) - y||_M^2, then step.

    The left side grows and the step shrinks as tau increases, so the
    complementarity gap is monotone and a bracketed root-find applies.
    One Gram solve per probe.
    """
    p = prob.p
    if p == 2.0:
        x = _tau_step(prob, glin, 1.0, counter)  # tau merges into the quadratic
        return x, 1.0
    if not np.any(glin):
        return prob.center.copy(), 0.0

    def gap(tau):
        x = gap.cache[tau] if tau in gap.cache else _tau_step(prob, glin, tau, counter)
        gap.cache = {tau: x}
        return tau ** (2.0 / (p - 2.0)) - prob.m_norm(x - prob.center) ** 2

    gap.cache = {}
    lo = hi = max(tau_seed, 1e-30)
    glo = ghi = gap(lo)
    doubles = 0
    while glo > 0.0:
        lo /= 4.0
        glo = gap(lo)
        doubles += 1
        if doubles > 200 or lo < 1e-290:
            if abs(glo) <= 1e-20:
                break
            raise BisectionStallError("no lower bracket for the step scale")
    doubles = 0
    while ghi < 0.0:
        hi *= 4.0
        ghi = gap(hi)
        doubles += 1
        if doubles > 200:
            raise BisectionStallError("no upper bracket for the step scale")
    if lo == hi or glo == 0.0:
        tau = lo
    elif ghi == 0.0:
        tau = hi
    else:
        tau = brentq(gap, lo, hi, xtol=1e-300, rtol=8.9e-16, maxiter=300)
    x = _tau_step(prob, glin, tau, counter)
    return x, tau


def prox_solve(prob: ProxProblem, x0: np.ndarray | None = None,
               tol: float = 1e-12,
               counter: SolveCounter | None = None) -> ProxCertificate:
    """Approximately minimize the proximal objective from x0.

    Runs relative-smoothness descent steps until the stationarity residual
    measured in the inverse metric drops below
    e alpha p^{p+1} ||x - y||_M^{p-1} + tol with alpha = 1/(128 p^2).
    """
    p, y = prob.p, prob.center
    alpha = PROX_ALPHA_SCALE / p ** 2
    if p == 2.0:
        # The regularized objective is itself a quadratic; minimize exactly.
        diag = np.ones(prob.A.n) + prob.cp * prob.m_diag
        rhs = prob.A.a.T @ prob.b + prob.cp * prob.m_apply(y)
        x = gram_solve(prob.A, DiagonalWeights(diag), rhs, counter=counter,
                       phase="prox")
        residual = prob.m_inv_norm(prob.grad_f_reg(x), counter=counter)
        thr = math.e * alpha * p ** (p + 1) * prob.m_norm(x - y) + tol
        return ProxCertificate(x=x, residual=residual, threshold=thr,
                               alpha=alpha, delta=tol, inner_iterations=1,
                               tau=1.0)
    x = y.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    best_x, best_val = x, prob.f_reg(x)
    tau = fpow(max(prob.m_norm(x - y), 1e-8), p - 2.0)
    if not math.isfinite(tau):
        x, tau = y.copy(), 1.0
        best_x, best_val = x, prob.f_reg(x)
    cap = int(INNER_RATE_CONSTANT * max(math.log(1.0 / min(tol, 0.5)), 1.0)) + 8
    stall = 0
    cert = None
    for it in range(cap):
        grad = prob.grad_f_reg(x)
        residual = prob.m_inv_norm(grad, counter=counter)
        threshold = (math.e * alpha * p ** (p + 1)
                     * prob.m_norm(x - y) ** (p - 1.0) + tol)
        cert = ProxCertificate(x=x, residual=residual, threshold=threshold,
                               alpha=alpha, delta=tol, inner_iterations=it,
                               tau=tau)
        if residual <= threshold:
            return cert
        step = x - y
        dist = prob.m_norm(step)
        grad_h = 2.0 * (prob.A.a.T @ (prob._hess_center * (prob.A.a @ step)))
        if dist > 0:
            grad_h = grad_h + p * prob.cp * dist ** (p - 2.0) * prob.m_apply(step)
        glin = grad - 4.0 * grad_h
        x_new, tau = _solve_inner_subproblem(prob, glin, max(tau, 1e-30), counter)
        val = prob.f_reg(x_new)
        if val < best_val * (1.0 + 1e-12) + 1e-300:
            if val < best_val:
                best_x, best_val = x_new, val
                stall = 0
            else:
                stall += 1
            x = x_new
        else:
            stall += 1
            x = best_x.copy()
        if stall >= 6:
            return cert
    return cert


def hessian_stability_check(y: np.ndarray, x: np.ndarray, prob: ProxProblem,
                            samples: int = 200, seed=0) -> float:
    """Worst violation of the factor-e sandwich between the two Hessians.

    Samples quadratic forms of the regularized objective's Hessian at x
    against the surrogate centered at y; returns the largest of
    q_f / (e q_h) and q_h / (e q_f), which must stay at most 1 + 1e-8.
    """
    p = prob.p
    A = prob.A.a
    rng = np.random.default_rng(seed)
    hess_x = p * (p - 1.0) * np.abs(A @ x - prob.b) ** (p - 2.0)
    hess_y = p * (p - 1.0) * np.abs(A @ y - prob.b) ** (p - 2.0)
    step = x - y
    dist = prob.m_norm(step)
    m_step = prob.m_apply(step) if dist > 0 else None
    worst = 0.0
    for _ in range(samples):
        z = rng.standard_normal(prob.A.d)
        az = A @ z
        q_reg = 0.0
        if dist > 0 and p > 2:
            q_reg = (p * prob.cp * dist ** (p - 2.0) * float(az @ (prob.m_diag * az))
                     + p * (p - 2.0) * prob.cp * dist ** (p - 4.0)
                     * float(m_step @ z) ** 2)
        elif p == 2:
            q_reg = 2.0 * prob.cp * float(az @ (prob.m_diag * az))
        q_f = float(az @ (hess_x * az)) + q_reg
        q_h = 2.0 * float(az @ (hess_y * az)) + q_reg
        if q_f <= 0 and q_h <= 0:
            continue
        worst = max(worst, q_f / (math.e * q_h), q_h / (math.e * q_f))
    return worst


def strong_convexity_check(y: np.ndarray, delta: np.ndarray, p: float) -> bool:
    """Uniform convexity of the p-th power norm along delta."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    v = p * np.abs(y) ** (p - 1.0) * np.sign(y)
    lhs = (float(np.sum(np.abs(y) ** p)) + float(v @ delta)
           + (p - 1.0) / (p * 2.0 ** p) * float(np.sum(np.abs(delta) ** p)))
    rhs = float(np.sum(np.abs(y + delta) ** p))
    scale = abs(lhs) + abs(rhs) + 1.0
    return lhs <= rhs + 1e-9 * scale


def distance_bound(d: int, p: float, err: float) -> float:
    """Metric distance to the optimum implied by a function-error bound."""
    return HALVING_DISTANCE_COEFF * d ** (0.5 - 1.0 / p) * err ** (1.0 / p)


def ms_accelerate(A: DenseMatrix, b: np.ndarray, p: float,
                  weights: LewisOverestimate, x0: np.ndarray, eps: float,
                  dist_bound: float, counter: SolveCounter | None = None,
                  lower_bound_fn=None, seed=0, max_steps: int | None = None,
                  stats: dict | None = None):
    """Accelerated proximal-point loop reducing f error below eps.

    Maintains the usual (step-weight, momentum-point) pair; each step
    searches for a scale lambda whose proximal response satisfies
    lambda p C_p ||y - x_tilde||_M^{p-2} in [1/2, 2], then mixes the
    gradient at the response into the momentum point through the inverse
    metric.  Stops early when ``lower_bound_fn`` certifies the target.
    """
    p = float(p)
    cp = reg_coefficient(p)
    delta = max(eps / (1e20 * p ** 2 * max(dist_bound, 1e-30)), 1e-14)
    d = A.d
    if max_steps is None:
        k_theory = math.ceil(8.0 * p ** (2.0 / 3.0) * d ** ((p - 2.0) / (3 * p - 2.0)))
        max_steps = min(int(k_theory * (6 + 60) ** 2), 10 ** 9)

    def f(x):
        with np.errstate(over="ignore"):
            return float(np.sum(np.abs(A.a @ x - b) ** p))

    x = np.asarray(x0, dtype=float).copy()
    v = x.copy()
    acc_weight = 0.0
    lam = None
    prox_calls = 0
    inner_total = 0
    f_x = f(x)
    stall = 0
    for _ in range(max_steps):
        if lower_bound_fn is not None:
            gap = f_x - lower_bound_fn(x)
            if gap <= eps:
                break
        prob_center = None
        lam_try = lam
        dist = 0.0
        for _ in range(MS_BISECTION_CAP):
            if acc_weight == 0.0:
                x_tilde = v.copy()
            else:
                a_try = 0.5 * (lam_try + math.sqrt(lam_try ** 2
                                                   + 4 * lam_try * acc_weight))
                x_tilde = (acc_weight * x + a_try * v) / (acc_weight + a_try)
            if not np.all(np.isfinite(x_tilde)) or f(x_tilde) > 1e12 * (1 + f_x):
                # momentum overshoot: the step scale was far too large
                lam_try *= 0.25
                prob_center = None
                continue
            if prob_center is None or not np.array_equal(prob_center.center, x_tilde):
                prob_center = ProxProblem(A, b, p, weights, x_tilde)
                cert = prox_solve(prob_center, x0=x, tol=delta, counter=counter)
                prox_calls += 1
                inner_total += cert.inner_iterations
            dist = prob_center.m_norm(cert.x - x_tilde)
            if acc_weight == 0.0 or p == 2.0:
                # x_tilde has no lambda dependence; set the scale directly.
                lam_try = 1.0 / (p * cp * fpow(max(dist, 1e-30), p - 2.0))
                break
            measure = lam_try * p * cp * fpow(dist, p - 2.0)
            if 0.5 <= measure <= 2.0:
                break
            lam_try = lam_try * 2.0 if measure < 0.5 else lam_try * 0.5
            prob_center = None
        if prob_center is None:
            if not np.all(np.isfinite(x_tilde)):
                break
            prob_center = ProxProblem(A, b, p, weights, x_tilde)
            cert = prox_solve(prob_center, x0=x, tol=delta, counter=counter)
            prox_calls += 1
            inner_total += cert.inner_iterations
            dist = prob_center.m_norm(cert.x - x_tilde)
        if dist <= 1e-15 * (1.0 + prob_center.m_norm(x_tilde)):
            # The proximal response pins the center: x_tilde is stationary.
            if prob_center.f_reg(cert.x) <= f_x:
                x, f_x = cert.x, f(cert.x)
            break
        lam = lam_try
        a_new = 0.5 * (lam + math.sqrt(lam ** 2 + 4 * lam * acc_weight))
        y_new = cert.x
        grad = prob_center.grad_f(y_new)
        ginv = gram_solve(A, DiagonalWeights(prob_center.m_diag), grad,
                          counter=counter, phase="ms")
        v_step = a_new * ginv
        step_norm = prob_center.m_norm(v_step)
        guard = 1e3 * (1.0 + prob_center.m_norm(x) + prob_center.m_norm(v))
        if not math.isfinite(step_norm):
            # a degenerate metric direction: drop the momentum mix entirely
            v_step = np.zeros_like(v_step)
        elif step_norm > guard:
            v_step *= guard / step_norm
        v = v - v_step
        acc_weight += a_new
        f_y = f(y_new)
        if f_y < f_x:
            x, f_x = y_new, f_y
            stall = 0
        else:
            stall += 1
        if stall >= 20:
            break
    info = {"prox_calls": prox_calls, "inner_iterations": inner_total,
            "f_value": f_x}
    if stats is not None:
        stats["prox_calls"] = stats.get("prox_calls", 0) + prox_calls
        stats["inner_iterations"] = (stats.get("inner_iterations", 0)
                                     + inner_total)
    return x, info


def halve_error(A: DenseMatrix, b: np.ndarray, p: float,
                weights: LewisOverestimate, x0: np.ndarray, err: float,
                counter: SolveCounter | None = None, lower_bound_fn=None,
                seed=0, stats: dict | None = None):
    """Given f(x0) - f* <= err, produce x' with f(x') - f* <= err/2."""
    dist = distance_bound(A.d, p, err)
    x, _ = ms_accelerate(A, b, p, weights, x0, eps=err / 2.0, dist_bound=dist,
                         counter=counter, lower_bound_fn=lower_bound_fn,
                         seed=seed, stats=stats)
    return x


def solve_pnorm_accel(instance: ProblemInstance, seed=0,
                      counter: SolveCounter | None = None,
                      max_halvings: int = 300):
    """Full accelerated solve: least-squares start, then error halvings."""
    A, b, p, eps = instance.A, instance.b, instance.p, instance.eps
    if p < 2:
        raise InvalidInputError("acceleration path requires p >= 2")
    counter = counter if counter is not None else SolveCounter()
    t0 = time.perf_counter()
    weights = lewis_overestimates(A, p, seed=seed, counter=counter)
    x = gram_solve(A, DiagonalWeights.ones(A.n), A.a.T @ b, counter=counter,
                   phase="init")
    b_scale = pnorm(b, p)

    def certify(xc):
        return lp_dual_bound(A, b, xc, p, counter=counter)

    stats: dict = {}
    certified = False
    lower = 0.0
    for _ in range(max_halvings):
        hi = instance.residual_norm(x)
        if hi <= 1e-13 * max(b_scale, 1.0):
            certified = True
            break
        lower = min(max(lower, certify(x)), hi)
        if lower > 0 and hi <= (1.0 + eps) * lower:
            certified = True
            break
        err = max(hi ** p - lower ** p, 1e-300)
        x_new = halve_error(A, b, p, weights, x, err, counter=counter,
                            lower_bound_fn=lambda xc: certify(xc) ** p,
                            seed=seed, stats=stats)
        if instance.residual_norm(x_new) < hi:
            x = x_new
        else:
            break
    u = A.a @ x - b
    hi = instance.residual_norm(x)
    if hi <= 1e-13 * max(b_scale, 1.0):
        certified = True
        gap = 0.0
    else:
        gap = (hi / lower - 1.0) if lower > 0 else math.inf
    if not certified:
        raise BudgetExceededError(
            f"acceleration stalled at relative gap {gap:.3g}")
    report = SolveReport(
        method="accel", p=p, eps=eps, n=A.n, d=A.d, seed=None,
        gram_solves=counter.gram_solves,
        sketch_applications=counter.sketch_applications,
        phase_counts={"prox_calls": stats.get("prox_calls", 0),
                      "inner_iterations": stats.get("inner_iterations", 0),
                      **counter.by_phase},
        residual_lp=hi, residual_l2=float(np.linalg.norm(u)),
        certified_gap=gap, wall_time=time.perf_counter() - t0)
    return x, report
