import math

import numpy as np
import pytest

from lpreg.errors import InvalidInputError
from lpreg.lewis import (
    exact_lewis_oracle,
    half_minus_inv,
    lewis_overestimates,
    lewis_residual,
    norm_sandwich_check,
    reg_lewis,
    reg_lewis_residual,
    reg_lewis_update,
    reweight_by,
)
from lpreg.linalg import DenseMatrix, leverage_scores


def random_matrix(n, d, seed):
    rng = np.random.default_rng(seed)
    return DenseMatrix(rng.standard_normal((n, d)))


def check_certificate(A, est):
    d = A.d
    assert d - 1e-9 <= est.mass <= 2 * d + 1e-9
    sig = leverage_scores(reweight_by(A, est.weights, half_minus_inv(est.p)))
    assert np.all(est.weights + 1e-8 >= sig)


class TestOverestimates:
    def test_identity_p4(self):
        est = lewis_overestimates(DenseMatrix(np.eye(4)), 4.0, seed=0)
        assert np.all(est.weights >= 1.35) and np.all(est.weights <= 1.65)
        assert 5.4 <= est.mass <= 6.6

    def test_identity_p2_dominates(self):
        est = lewis_overestimates(DenseMatrix(np.eye(4)), 2.0, seed=0)
        assert np.all(est.weights >= 1.35) and np.all(est.weights <= 1.65)
        assert np.all(est.weights >= 1.0)

    def test_gaussian_p8_certificate(self):
        A = random_matrix(100, 6, 7)
        est = lewis_overestimates(A, 8.0, seed=1)
        assert est.mass <= 12.0
        check_certificate(A, est)

    @pytest.mark.parametrize("p", [2.0, 3.0, 4.0, 8.0, math.inf])
    def test_certificate_sweep(self, p):
        for seed in range(4):
            rng = np.random.default_rng(200 + seed)
            n = int(rng.integers(20, 80))
            d = int(rng.integers(2, 8))
            A = DenseMatrix(rng.standard_normal((n, d)))
            check_certificate(A, lewis_overestimates(A, p, seed=seed))

    def test_rejects_small_p(self):
        with pytest.raises(InvalidInputError):
            lewis_overestimates(DenseMatrix(np.eye(3)), 1.5)


class TestNormSandwich:
    def test_identity_p4_values(self):
        est = lewis_overestimates(DenseMatrix(np.eye(2)), 4.0, seed=0)
        est.weights[:] = 1.5
        lp, wl2, up = norm_sandwich_check(DenseMatrix(np.eye(2)), est,
                                          np.array([1.0, 0.0]))
        assert abs(lp - 1.0) <= 1e-12
        assert abs(wl2 - 1.5 ** 0.25) <= 1e-12
        assert abs(up - 3.0 ** 0.25) <= 1e-12

    def test_p2_everything_collapses(self):
        est = lewis_overestimates(DenseMatrix(np.eye(2)), 2.0, seed=0)
        est.weights[:] = 1.5
        lp, wl2, up = norm_sandwich_check(DenseMatrix(np.eye(2)), est,
                                          np.array([3.0, 4.0]))
        assert lp == pytest.approx(5.0, abs=1e-12)
        assert wl2 == pytest.approx(5.0, abs=1e-12)
        assert up == pytest.approx(5.0, abs=1e-12)

    @pytest.mark.parametrize("p", [2.0, 3.0, 4.0, 8.0, math.inf])
    def test_sandwich_sweep(self, p):
        A = random_matrix(50, 5, 13)
        est = lewis_overestimates(A, p, seed=2)
        rng = np.random.default_rng(99)
        for _ in range(100):
            x = rng.standard_normal(5)
            lp, wl2, up = norm_sandwich_check(A, est, x)
            assert lp <= wl2 * (1 + 1e-10)
            assert wl2 <= up * (1 + 1e-10)


class TestRegLewis:
    def test_identity_q15(self):
        rw = reg_lewis(DenseMatrix(np.eye(3)), np.zeros(3), 1.5, seed=0)
        assert np.all(rw.weights >= 0.96) and np.all(rw.weights <= 1.05)

    def test_duplicated_row_q2(self):
        rw = reg_lewis(DenseMatrix(np.array([[1.0], [1.0]])), np.zeros(2), 2.0,
                       seed=0)
        assert np.allclose(rw.weights, 0.5, rtol=0.02)

    def test_self_consistency(self):
        A = random_matrix(60, 4, 21)
        rw = reg_lewis(A, 0.1 * np.ones(60), 1.5, seed=3)
        rel, lo, hi = reg_lewis_residual(A, rw)
        assert rel <= 0.15
        assert 0.85 <= lo and hi <= 1.18

    def test_q2_ignores_regularizer(self):
        A = random_matrix(40, 5, 5)
        rw = reg_lewis(A, 0.7 * np.ones(40), 2.0, seed=4)
        assert np.allclose(rw.weights, leverage_scores(A), rtol=0.05, atol=1e-9)

    def test_rejects_bad_q(self):
        with pytest.raises(InvalidInputError):
            reg_lewis(DenseMatrix(np.eye(3)), np.zeros(3), 2.5)
        with pytest.raises(InvalidInputError):
            reg_lewis(DenseMatrix(np.eye(3)), -np.ones(3), 1.5)


class TestExactOracle:
    def test_identity(self):
        w = exact_lewis_oracle(DenseMatrix(np.eye(5)), 3.0)
        assert np.allclose(w, 1.0, atol=1e-9)

    def test_p2_equals_leverage(self):
        A = random_matrix(30, 4, 8)
        w = exact_lewis_oracle(A, 2.0)
        assert np.allclose(w, leverage_scores(A), atol=1e-9)

    def test_fixed_point_residual(self):
        A = random_matrix(40, 3, 17)
        w = exact_lewis_oracle(A, 3.5)
        assert lewis_residual(A, w, 3.5) <= 1e-9

    def test_agrees_with_reg_lewis_at_q2(self):
        A = random_matrix(30, 4, 30)
        w = exact_lewis_oracle(A, 2.0)
        rw = reg_lewis(A, np.zeros(30), 2.0, seed=0)
        assert np.allclose(w, rw.weights, atol=1e-6)


def log_reweighted_quad(A, v, p, i):
    # phi_i(v) = log(v_i^{-2/p} a_i^T (A^T diag(v)^{1-2/p} A)^{-1} a_i)
    vv = np.maximum(v, 1e-14)
    gram = (A.a * (vv ** (1 - 2.0 / p))[:, None]).T @ A.a
    quad = A.a[i] @ np.linalg.solve(gram, A.a[i])
    return math.log(vv[i] ** (-2.0 / p) * quad)


class TestAnalysisProperties:
    @pytest.mark.parametrize("p", [3.0, 4.0, 8.0])
    def test_potential_is_convex(self, p):
        # Midpoint convexity of the log reweighted quadratic, sampled.
        for seed in range(5):
            A = random_matrix(20, 3, 300 + seed)
            rng = np.random.default_rng(400 + seed)
            for _ in range(20):
                u = rng.uniform(0.05, 3.0, size=20)
                v = rng.uniform(0.05, 3.0, size=20)
                i = int(rng.integers(0, 20))
                mid = log_reweighted_quad(A, (u + v) / 2, p, i)
                avg = (log_reweighted_quad(A, u, p, i)
                       + log_reweighted_quad(A, v, p, i)) / 2
                assert mid <= avg + 1e-9

    @pytest.mark.parametrize("q", [1.5, 1.8, 2.0])
    def test_update_contracts_toward_fixed_point(self, q):
        for seed in range(20 // 3 + 1):
            A = random_matrix(25, 3, 500 + seed)
            w_star = exact_lewis_oracle(A, q, tol=1e-12)
            rng = np.random.default_rng(600 + seed)
            nu = 4.0
            u = w_star * np.exp(rng.uniform(-math.log(nu), math.log(nu), size=25))
            u_new = reg_lewis_update(A, u, np.zeros(25), q)
            ratio = np.maximum(u_new, 1e-14) / np.maximum(w_star, 1e-14)
            dist_new = max(ratio.max(), 1.0 / ratio.min())
            assert dist_new <= nu ** (1 - q / 2.0) * (1 + 1e-6)
