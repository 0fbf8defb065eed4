import math

import numpy as np
import pytest

from lpreg.errors import BudgetExceededError
from lpreg.linalg import DenseMatrix, SolveCounter
from lpreg.mwu import MwuGammaSolver
from lpreg.problem import ProblemInstance, pnorm
from lpreg.refine import (
    GammaSolverContract,
    bregman_terms,
    line_search_lp,
    lp_dual_bound,
    refine_to_accuracy,
    scalar_refine_bounds,
)


class TestBregmanTerms:
    def test_zero_point(self):
        g, r = bregman_terms(np.zeros(3), 4.0)
        assert np.all(g == 0) and np.all(r == 0)

    def test_direct_formula(self):
        g, r = bregman_terms(np.array([1.0, -2.0]), 4.0)
        assert np.allclose(g, [4.0, -32.0])
        assert np.allclose(r, [1.0, 4.0])

    def test_cubic(self):
        g, r = bregman_terms(np.array([3.0]), 3.0)
        assert np.allclose(g, [27.0]) and np.allclose(r, [3.0])

    def test_p2_resistance_is_one(self):
        g, r = bregman_terms(np.array([0.0, 5.0]), 2.0)
        assert np.allclose(r, 1.0)
        assert np.allclose(g, [0.0, 10.0])


class TestScalarRefineBounds:
    def test_zero_step(self):
        lower, upper, actual = scalar_refine_bounds(1.0, 0.0, 4.0)
        assert lower == 0.0 and upper == 0.0 and actual == 0.0

    def test_unit_step_from_zero(self):
        lower, upper, actual = scalar_refine_bounds(0.0, 1.0, 2.0)
        assert actual == pytest.approx(1.0)
        assert lower == pytest.approx(0.25 + 0.125)
        assert upper == pytest.approx(8.0 + 4.0)

    @pytest.mark.parametrize("p", [2.0, 2.5, 3.0, 4.0, 8.0])
    def test_grid_sandwich(self, p):
        xs = np.linspace(-3.0, 3.0, 601)
        x, d = np.meshgrid(xs, xs, indexing="ij")
        r = np.abs(x) ** (p - 2.0)
        g = p * r * x
        actual = np.abs(x + d) ** p - np.abs(x) ** p - g * d
        lower = (p / 8.0) * r * d ** 2 + 2.0 ** (-p - 1) * np.abs(d) ** p
        upper = 2.0 * p ** 2 * r * d ** 2 + p ** p * np.abs(d) ** p
        tol = 1e-8 + 1e-12 * np.maximum(np.abs(actual), upper)
        assert np.all(lower <= actual + tol)
        assert np.all(actual <= upper + tol)


class TestScalarPowerInequalities:
    @pytest.mark.parametrize("k", [2.0, 3.0, 4.0, 7.5, 10.0])
    def test_growth_linear_plus_power(self, k):
        # (a+b)^k - a^k <= 3k a^{k-1} b + 3 k^k b^k
        v = np.linspace(0.0, 5.0, 501)
        a, b = np.meshgrid(v, v, indexing="ij")
        lhs = (a + b) ** k - a ** k
        rhs = 3.0 * k * a ** (k - 1.0) * b + 3.0 * k ** k * b ** k
        assert np.all(lhs <= rhs + 1e-9 + 1e-12 * rhs)

    @pytest.mark.parametrize("k", [1.0, 1.3, 2.0, 5.0])
    def test_growth_four_to_the_k(self, k):
        # (a+b)^k - a^k <= 4^k (a^{k-1} b + b^k)
        v = np.linspace(0.0, 5.0, 501)
        a, b = np.meshgrid(v, v, indexing="ij")
        lhs = (a + b) ** k - a ** k
        rhs = 4.0 ** k * (a ** (k - 1.0) * b + b ** k)
        assert np.all(lhs <= rhs + 1e-9 + 1e-12 * rhs)

    @pytest.mark.parametrize("p", [2.5, 3.0, 4.0, 8.0])
    def test_shifted_power_split(self, p):
        # |x+y|^{p-2} <= e |x|^{p-2} + p^{p-2} |y|^{p-2}
        v = np.linspace(-4.0, 4.0, 801)
        x, y = np.meshgrid(v, v, indexing="ij")
        lhs = np.abs(x + y) ** (p - 2.0)
        rhs = math.e * np.abs(x) ** (p - 2.0) + p ** (p - 2.0) * np.abs(y) ** (p - 2.0)
        assert np.all(lhs <= rhs + 1e-9 + 1e-12 * rhs)

    def test_conjugate_pair_split(self):
        # |x+y|^n <= |ax|^n + |By|^n whenever 1/a + 1/B = 1
        rng = np.random.default_rng(0)
        v = np.linspace(-4.0, 4.0, 161)
        x, y = np.meshgrid(v, v, indexing="ij")
        for alpha in rng.uniform(1.0 + 1e-6, 4.0, size=12):
            beta = alpha / (alpha - 1.0)
            for n in (0.5, 1.0, 2.0, 3.7):
                lhs = np.abs(x + y) ** n
                rhs = np.abs(alpha * x) ** n + np.abs(beta * y) ** n
                assert np.all(lhs <= rhs + 1e-9 + 1e-12 * rhs)


class TestLineSearch:
    def test_finds_scalar_quartic_minimum(self):
        u = np.array([1.0, -1.0, 2.0])
        w = np.array([1.0, 1.0, 1.0])
        c, val = line_search_lp(u, -w, 4.0)
        grid = np.linspace(0, 4, 40001)
        best = min(float(np.sum(np.abs(u - g * w) ** 4)) for g in grid)
        assert val <= best + 1e-9

    def test_no_descent_returns_zero(self):
        u = np.array([1.0, 2.0])
        c, val = line_search_lp(u, u, 4.0)
        assert c == 0.0 and val == pytest.approx(float(np.sum(u ** 4)))


class TestDualBound:
    @pytest.mark.parametrize("p", [2.0, 3.0, 4.0, 8.0])
    def test_weak_duality_on_random_points(self, p):
        rng = np.random.default_rng(11)
        A = DenseMatrix(rng.standard_normal((40, 4)))
        b = rng.standard_normal(40)
        from lpreg.harness import oracle_opt
        opt = oracle_opt(ProblemInstance(A, b, p), tol=1e-10)
        for _ in range(10):
            x = rng.standard_normal(4)
            lb = lp_dual_bound(A, b, x, p)
            assert lb <= opt * (1 + 1e-9)

    def test_tightens_at_optimum(self):
        rng = np.random.default_rng(12)
        A = DenseMatrix(rng.standard_normal((40, 4)))
        b = rng.standard_normal(40)
        inst = ProblemInstance(A, b, 4.0, eps=1e-10)
        from lpreg.harness import solve
        x, rep = solve(inst, "accel", seed=0)
        lb = lp_dual_bound(A, b, x, 4.0)
        assert pnorm(A.a @ x - b, 4.0) <= (1 + 1e-9) * lb

    def test_constrained_bound_is_valid(self):
        rng = np.random.default_rng(13)
        A = DenseMatrix(rng.standard_normal((30, 4)))
        b = rng.standard_normal(30)
        C = rng.standard_normal((1, 4))
        v = np.array([0.7])
        # brute force on the 3-dim feasible slice
        from scipy.linalg import null_space
        N = null_space(C)
        x0 = C.T @ np.linalg.solve(C @ C.T, v)
        best = math.inf
        rng2 = np.random.default_rng(14)
        xi = np.zeros(N.shape[1])
        for _ in range(4000):
            cand = xi + 0.3 * rng2.standard_normal(N.shape[1])
            val = pnorm(A.a @ (x0 + N @ cand) - b, 4.0)
            if val < best:
                best, xi = val, cand
        for _ in range(8):
            x = x0 + N @ (xi + 0.01 * rng2.standard_normal(N.shape[1]))
            lb = lp_dual_bound(A, b, x, 4.0, constraint=(C, v))
            assert lb <= best * (1 + 1e-6)


def mwu_contract(A, p, seed=0, counter=None):
    solver = MwuGammaSolver(A, p, seed=seed, counter=counter)
    return GammaSolverContract(solver.gamma, solver)


class TestRefineToAccuracy:
    def test_consistent_system_is_exact(self):
        A = DenseMatrix(np.array([[1.0], [2.0]]))
        b = np.array([3.0, 6.0])
        inst = ProblemInstance(A, b, 4.0, eps=1e-6)
        x, rep = refine_to_accuracy(inst, mwu_contract(A, 4.0))
        assert np.allclose(x, [3.0], atol=1e-10)
        assert rep.residual_lp <= 1e-10

    def test_symmetric_midpoint(self):
        A = DenseMatrix(np.array([[1.0], [1.0]]))
        b = np.array([0.0, 2.0])
        inst = ProblemInstance(A, b, 4.0, eps=1e-8)
        x, rep = refine_to_accuracy(inst, mwu_contract(A, 4.0))
        assert x[0] == pytest.approx(1.0, abs=1e-6)
        assert rep.residual_lp == pytest.approx(2.0 ** 0.25, rel=1e-8)

    def test_zero_rhs_short_circuits(self):
        rng = np.random.default_rng(3)
        A = DenseMatrix(rng.standard_normal((10, 3)))
        inst = ProblemInstance(A, np.zeros(10), 4.0, eps=1e-6)
        x, rep = refine_to_accuracy(inst, mwu_contract(A, 4.0))
        assert np.all(x == 0.0) and rep.residual_lp == 0.0

    def test_random_instance_certified_vs_oracle(self):
        rng = np.random.default_rng(4)
        A = DenseMatrix(rng.standard_normal((80, 5)))
        b = rng.standard_normal(80)
        inst = ProblemInstance(A, b, 4.0, eps=1e-6)
        counter = SolveCounter()
        x, rep = refine_to_accuracy(inst, mwu_contract(A, 4.0, counter=counter),
                                    counter=counter)
        from lpreg.harness import oracle_opt
        opt = oracle_opt(inst, tol=1e-9)
        assert rep.residual_lp <= (1 + 1e-6) * opt
        assert rep.certified_gap <= 1e-6
        assert rep.gram_solves == counter.gram_solves

    def test_monotone_objective_and_budget_fields(self):
        # monotonicity holds by construction of the accepting line search;
        # verify through the recorded round count and a wrapped solver.
        rng = np.random.default_rng(5)
        A = DenseMatrix(rng.standard_normal((30, 3)))
        b = rng.standard_normal(30)
        inst = ProblemInstance(A, b, 3.0, eps=1e-6)
        seen = []
        inner = MwuGammaSolver(A, 3.0, seed=0)

        def spy(nu, g, R, C, x=None):
            seen.append(pnorm(A.a @ x - b, 3.0))
            return inner(nu, g, R, C, x=x)

        x, rep = refine_to_accuracy(inst, GammaSolverContract(inner.gamma, spy))
        assert all(seen[i + 1] <= seen[i] * (1 + 1e-12) for i in range(len(seen) - 1))

    def test_constraint_preserved(self):
        rng = np.random.default_rng(6)
        A = DenseMatrix(rng.standard_normal((30, 4)))
        b = rng.standard_normal(30)
        C = rng.standard_normal((1, 4))
        v = np.array([1.3])
        inst = ProblemInstance(A, b, 4.0, eps=1e-6)
        solver = MwuGammaSolver(A, 4.0, seed=0, constraint=C)
        x, rep = refine_to_accuracy(inst, GammaSolverContract(solver.gamma, solver),
                                    constraint=(C, v))
        assert abs(float((C @ x)[0]) - 1.3) <= 1e-10
        # certified against a brute-force search over the feasible slice
        from scipy.linalg import null_space
        N = null_space(C)
        x0 = C.T @ np.linalg.solve(C @ C.T, v)
        rng2 = np.random.default_rng(7)
        best = pnorm(A.a @ x - b, 4.0)
        for _ in range(2000):
            cand = x0 + N @ (N.T @ (x - x0) + 0.05 * rng2.standard_normal(N.shape[1]))
            best = min(best, pnorm(A.a @ cand - b, 4.0))
        assert pnorm(A.a @ x - b, 4.0) <= best * (1 + 1e-6)

    def test_broken_solver_raises_budget_error(self):
        rng = np.random.default_rng(8)
        A = DenseMatrix(rng.standard_normal((20, 3)))
        b = rng.standard_normal(20)
        inst = ProblemInstance(A, b, 4.0, eps=1e-6)

        def garbage(nu, g, R, C, x=None):
            return np.zeros(3)

        with pytest.raises(BudgetExceededError):
            refine_to_accuracy(inst, GammaSolverContract(2.0, garbage),
                               max_rounds=5)
