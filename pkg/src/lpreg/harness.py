"""Instance generators, independent optimum oracles, and experiment runner.

The oracle here is deliberately implemented against raw numpy routines and
shares nothing with the solver modules beyond matrix storage, so solver
accuracy claims are checked against genuinely independent ground truth.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accel import solve_pnorm_accel
from .dual import DualInstance, solve_lq, stack_instance
from .errors import (
    InvalidInputError,
    LpregError,
    NoConvergenceError,
    RankDeficientError,
)
from .linalg import DenseMatrix, DiagonalWeights, SolveCounter, gram_solve
from .linf import linf_regress
from .mwu import MAX_MWU_P, MwuGammaSolver, ResidualInstance
from .problem import ProblemInstance, pnorm
from .refine import GammaSolverContract, refine_to_accuracy
from .report import SolveReport

FAMILIES = ("gaussian", "ill_conditioned", "planted_residual", "coherent_rows")
METHODS = ("mwu", "accel", "dual", "linf", "refine")
MAX_N, MAX_D = 2000, 64

ILL_COND_DECADES = 6.0


def _rng_for(family: str, n: int, d: int, seed: int) -> np.random.Generator:
    return np.random.default_rng(
        [FAMILIES.index(family), n, d, int(seed)])


def gen_instance(family: str, n: int, d: int, seed: int, p: float = 2.0,
                 eps: float = 1e-6) -> ProblemInstance:
    """Deterministic test instance; same arguments give the same bytes."""
    if family not in FAMILIES:
        raise InvalidInputError(f"unknown family {family!r}")
    if not 1 <= d <= min(n, MAX_D) or n > MAX_N:
        raise InvalidInputError(f"size {n} x {d} outside desk-scale caps")
    rng = _rng_for(family, n, d, seed)
    planted = None
    for attempt in range(4):
        if family == "gaussian":
            a = rng.standard_normal((n, d))
            b = rng.standard_normal(n)
        elif family == "ill_conditioned":
            qu, _ = np.linalg.qr(rng.standard_normal((n, d)))
            qv, _ = np.linalg.qr(rng.standard_normal((d, d)))
            decades = ILL_COND_DECADES if d > 1 else 0.0
            sing = 10.0 ** (-decades * np.arange(d) / max(d - 1, 1))
            a = qu @ (sing[:, None] * qv.T)
            b = rng.standard_normal(n)
        elif family == "planted_residual":
            a = rng.standard_normal((n, d))
            planted = rng.standard_normal(d)
            spikes = np.zeros(n)
            heavy = rng.choice(n, size=max(n // 10, 1), replace=False)
            spikes[heavy] = rng.standard_normal(heavy.size) * 2.0
            b = a @ planted + spikes + 0.01 * rng.standard_normal(n)
        else:  # coherent_rows
            a = rng.standard_normal((n, d))
            a[0] *= 50.0
            b = rng.standard_normal(n)
        try:
            A = DenseMatrix(a)
        except RankDeficientError:
            rng = _rng_for(family, n, d, seed + 7919 * (attempt + 1))
            continue
        return ProblemInstance(A, b, p, eps=eps, planted_x=planted)
    raise RankDeficientError(f"could not draw a full-rank {n} x {d} matrix")


def plant_residual_instance(n: int, d: int, p: float, seed: int,
                            r_scale: float = 1.0) -> ResidualInstance:
    """Scaled residual instance with an attached witness."""
    rng = np.random.default_rng([91, n, d, int(seed)])
    A = DenseMatrix(rng.standard_normal((n, d)))
    r = DiagonalWeights(r_scale * rng.uniform(0.0, 1.0, size=n))
    x = rng.standard_normal(d)
    ax = A.a @ x
    scale = max(pnorm(ax, p), math.sqrt(float(ax @ (r.values * ax))))
    x = x / (scale * 1.0000001)
    g = -x / float(x @ x)
    return ResidualInstance(A, g, r, p, witness=x)


def plant_dual_instance(n: int, d: int, q: float, seed: int) -> DualInstance:
    """Stacked dual instance with a feasibility witness.

    The b column leans toward the witness's norm-dual direction, which
    pins every feasible point's p-norm near one and keeps the instance in
    the unit-scaled regime the single-shot solver is analyzed in.
    """
    p = q / (q - 1.0)
    rng = np.random.default_rng([17, n, d, int(seed)])
    A = DenseMatrix(rng.standard_normal((n, d)))
    x = rng.standard_normal(n)
    x = x - A.a @ np.linalg.lstsq(A.a, x, rcond=None)[0]
    x = x / (pnorm(x, p) * 1.0000001)
    align = np.sign(x) * np.abs(x) ** (p - 1.0)
    noise = rng.standard_normal(n)
    b = align / max(pnorm(align, p / (p - 1.0)), 1e-300) \
        + 0.05 * noise / max(np.linalg.norm(noise), 1e-300)
    b = b / float(b @ x)
    g = rng.standard_normal(n)
    g = g - ((g @ x) + 1.0) / float(x @ x) * x
    r = rng.uniform(0.0, 1.0, size=n)
    quad = float(x @ (r * x))
    if quad > 0:
        r = r / (quad * 1.0000001)
    inst = stack_instance(A, b, g, DiagonalWeights(r), p, witness=x)
    return inst


def _newton_polish(a: np.ndarray, b: np.ndarray, x: np.ndarray, p: float,
                   tol: float, max_iter: int = 200) -> np.ndarray:
    """Damped second-order descent on sum |ax-b|^p, p >= 2."""
    lam = 1e-12
    fx = float(np.sum(np.abs(a @ x - b) ** p))
    for _ in range(max_iter):
        u = a @ x - b
        grad = p * (a.T @ (np.abs(u) ** (p - 2.0) * u))
        gn = float(np.linalg.norm(grad))
        scale = max(float(np.sum(np.abs(u) ** p)), 1e-300)
        if gn <= tol * scale:
            break
        hess = p * (p - 1.0) * (a * (np.abs(u) ** (p - 2.0))[:, None]).T @ a
        for _ in range(60):
            try:
                step = np.linalg.solve(hess + lam * np.eye(a.shape[1]), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            f_new = float(np.sum(np.abs(a @ (x + step) - b) ** p))
            if f_new < fx:
                x = x + step
                fx = f_new
                lam = max(lam / 10.0, 1e-14)
                break
            lam *= 10.0
        else:
            break
    return x


def _smoothed_small_q(a: np.ndarray, b: np.ndarray, q: float,
                      tol: float) -> np.ndarray:
    """Continuation on sum (u^2 + delta^2)^{q/2}, delta -> 0, for q < 2."""
    x = np.linalg.lstsq(a, b, rcond=None)[0]
    u0 = a @ x - b
    delta = max(float(np.max(np.abs(u0))), 1.0) * 0.1
    floor = 1e-14 * max(float(np.max(np.abs(u0))), 1.0)
    while True:
        for _ in range(100):
            u = a @ x - b
            w = (u * u + delta * delta) ** (q / 2.0 - 1.0)
            grad = q * (a.T @ (w * u))
            curv = q * w * (1.0 + (q - 2.0) * u * u / (u * u + delta * delta))
            hess = (a * curv[:, None]).T @ a
            try:
                step = np.linalg.solve(hess + 1e-14 * np.eye(a.shape[1]), -grad)
            except np.linalg.LinAlgError:
                break
            f_cur = float(np.sum((u * u + delta * delta) ** (q / 2.0)))
            t_step = 1.0
            for _ in range(60):
                un = a @ (x + t_step * step) - b
                if float(np.sum((un * un + delta * delta) ** (q / 2.0))) < f_cur:
                    break
                t_step *= 0.5
            else:
                break
            x = x + t_step * step
            if np.linalg.norm(t_step * step) <= 1e-15 * (1 + np.linalg.norm(x)):
                break
        if delta <= floor:
            return x
        delta = max(delta * 0.03, floor * 0.99)


def _linf_linear_program(a: np.ndarray, b: np.ndarray) -> float:
    """Exact minimax optimum: minimize t over -t <= ax - b <= t."""
    from scipy.optimize import linprog

    n, d = a.shape
    cost = np.zeros(d + 1)
    cost[-1] = 1.0
    a_ub = np.block([[a, -np.ones((n, 1))], [-a, -np.ones((n, 1))]])
    b_ub = np.concatenate([b, -b])
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub,
                  bounds=[(None, None)] * (d + 1), method="highs")
    if res.status != 0:
        raise NoConvergenceError(f"minimax linear program: {res.message}")
    return float(res.fun)


def oracle_opt(instance: ProblemInstance, tol: float = 1e-9) -> float:
    """Independent high-accuracy optimum of min ||Ax - b||_p.

    Shares only matrix storage with the solver modules.  Smooth exponents
    use descent plus damped second-order polishing (with a smoothing
    continuation below 2); the minimax case is an exact linear program.
    """
    A, b, p = instance.A, instance.b, instance.p
    if A.n > 500 or A.d > 20:
        raise InvalidInputError("oracle is desk-scale only (n <= 500, d <= 20)")
    a = A.a
    # shift out the least-squares fit and normalize: an exact symmetry that
    # keeps nearly consistent systems resolvable in floating point
    x_shift = np.linalg.lstsq(a, b, rcond=None)[0]
    resid0 = b - a @ x_shift
    scale = float(np.linalg.norm(resid0))
    if scale <= 1e-14 * max(float(np.linalg.norm(b)), 1.0):
        return 0.0
    b = resid0 / scale
    x = np.zeros(A.d)
    if p == 2.0:
        return scale * float(np.linalg.norm(b))
    if p == math.inf:
        return scale * _linf_linear_program(a, b)
    if p > 2.0:
        # a few safeguarded first-order steps, then quadratic convergence
        fx = float(np.sum(np.abs(a @ x - b) ** p))
        for _ in range(20):
            u = a @ x - b
            grad = p * (a.T @ (np.abs(u) ** (p - 2.0) * u))
            t_step = 1.0 / max(float(np.linalg.norm(grad)), 1e-30)
            while t_step > 1e-30:
                f_new = float(np.sum(np.abs(a @ (x - t_step * grad) - b) ** p))
                if f_new <= fx - 1e-4 * t_step * float(grad @ grad):
                    x = x - t_step * grad
                    fx = f_new
                    break
                t_step *= 0.5
        x = _newton_polish(a, b, x, p, tol * 1e-3)
        return scale * pnorm(a @ x - b, p)
    x = _smoothed_small_q(a, b, p, tol)
    return scale * pnorm(a @ x - b, p)


def solve(instance: ProblemInstance, method: str, seed: int = 0):
    """Dispatch a solve; returns (x, SolveReport) with the seed recorded.

    Before dispatching, the right-hand side is shifted by the least-squares
    fit and normalized; this is an exact symmetry of the problem and keeps
    nearly consistent systems (tiny optimum against large data) at unit
    scale, where certificates and tolerances are meaningful.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}")
    p = instance.p
    counter = SolveCounter()
    if method == "refine":
        method = ("linf" if p == math.inf else
                  "dual" if p < 2 else
                  "mwu" if p <= MAX_MWU_P else "accel")
    if method == "mwu" and not 2 <= p <= MAX_MWU_P:
        raise InvalidInputError(f"mwu requires 2 <= p <= {MAX_MWU_P}")
    if method == "accel" and (p < 2 or p == math.inf):
        raise InvalidInputError("accel requires finite p >= 2")
    if method == "dual" and not 1 < p <= 2:
        raise InvalidInputError("dual requires q in (1, 2]")
    if method == "linf" and p != math.inf:
        raise InvalidInputError("linf requires p = inf")

    A, b = instance.A, instance.b
    x_ls = gram_solve(A, DiagonalWeights.ones(A.n), A.a.T @ b,
                      counter=counter, phase="init")
    b_eff = b - A.a @ x_ls
    scale = float(np.linalg.norm(b_eff))
    if scale <= 1e-15 * max(float(np.linalg.norm(b)), 1.0):
        u = A.a @ x_ls - b
        report = SolveReport(method=method, p=p, eps=instance.eps,
                             n=A.n, d=A.d, seed=seed,
                             gram_solves=counter.gram_solves,
                             phase_counts=dict(counter.by_phase),
                             residual_lp=pnorm(u, p),
                             residual_l2=float(np.linalg.norm(u)),
                             certified_gap=0.0, wall_time=0.0)
        return x_ls, report
    inner = ProblemInstance(A, b_eff / scale, p, eps=instance.eps)

    if method == "mwu":
        solver = MwuGammaSolver(A, p, seed=seed, counter=counter)
        x_in, report = refine_to_accuracy(
            inner, GammaSolverContract(solver.gamma, solver), counter=counter)
        report.method = "mwu"
        report.phase_counts["progress_steps"] = solver.progress_steps
        report.phase_counts["boost_steps"] = solver.boost_steps
    elif method == "accel":
        x_in, report = solve_pnorm_accel(inner, seed=seed, counter=counter)
    elif method == "dual":
        x_in, report = solve_lq(inner, seed=seed, counter=counter)
    else:
        x_in, report = linf_regress(inner, seed=seed, counter=counter)
    x = x_ls + scale * x_in
    u = A.a @ x - b
    report.seed = seed
    report.n, report.d = A.n, A.d
    report.gram_solves = counter.gram_solves
    report.residual_lp = pnorm(u, p)
    report.residual_l2 = float(np.linalg.norm(u))
    return x, report


@dataclass
class ExperimentConfig:
    """One benchmark sweep: a method on a family across sizes and seeds."""

    method: str
    p: float
    eps: float
    family: str
    sizes: list
    seeds: list
    output_dir: str
    oracle: bool = False
    oracle_tol: float = 1e-9
    schema_version: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}")
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown family {self.family!r}")
        if isinstance(self.p, str):
            self.p = math.inf if self.p == "inf" else float(self.p)
        for n, d in self.sizes:
            if n > MAX_N or d > MAX_D:
                raise InvalidInputError(f"size {n} x {d} over the caps")
        if not self.seeds:
            raise InvalidInputError("at least one seed required")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        raw.setdefault("schema_version", 1)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise InvalidInputError(f"bad config: {exc}") from exc


def fit_loglog_slope(ds, counts) -> float:
    """Least-squares slope of log(count) against log(d)."""
    xs = np.log(np.asarray(ds, dtype=float))
    ys = np.log(np.asarray(counts, dtype=float))
    xs = xs - xs.mean()
    denom = float(xs @ xs)
    if denom == 0:
        return 0.0
    return float(xs @ (ys - ys.mean())) / denom


def run_experiment(config: ExperimentConfig) -> dict:
    """Run the sweep; writes per-run JSON, an aggregate CSV, and a summary.

    Solver errors are recorded per row and the sweep continues.  Outputs
    are deterministic functions of the config (wall time is kept out of
    the CSV).
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n, d in config.sizes:
        for seed in config.seeds:
            instance = gen_instance(config.family, n, d, seed, p=config.p,
                                    eps=config.eps)
            tag = f"{config.method}_{config.family}_{n}x{d}_s{seed}"
            try:
                x, report = solve(instance, config.method, seed=seed)
                if config.oracle:
                    opt = oracle_opt(instance, tol=config.oracle_tol)
                    gap = ((report.residual_lp - opt) / opt if opt > 0
                           else report.residual_lp)
                    report.certified_gap = gap
            except LpregError as exc:
                report = SolveReport(method=config.method, p=config.p,
                                     eps=config.eps, n=n, d=d, seed=seed,
                                     error=f"{type(exc).__name__}: {exc}")
            (out / f"{tag}.json").write_text(report.to_json(indent=2))
            rows.append(report)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "d", "method", "p", "eps", "gram_solves",
                         "certified_gap", "error"])
        for r in rows:
            writer.writerow([
                r.n, r.d, r.method, "inf" if r.p == math.inf else repr(r.p),
                repr(r.eps), r.gram_solves,
                "" if r.certified_gap is None else repr(r.certified_gap),
                r.error or ""])
    ok = [r for r in rows if r.error is None]
    summary = {"rows": len(rows), "failures": len(rows) - len(ok)}
    if ok:
        per_d = {}
        for r in ok:
            per_d.setdefault(r.d, []).append(r.gram_solves)
        if len(per_d) >= 2:
            ds = sorted(per_d)
            means = [float(np.mean(per_d[d])) for d in ds]
            summary["dims"] = ds
            summary["mean_gram_solves"] = means
            summary["loglog_slope"] = fit_loglog_slope(ds, means)
    (out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                 sort_keys=True))
    return summary
