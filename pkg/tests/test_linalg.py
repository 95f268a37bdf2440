import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpcomp.errors import ContractViolation
from sharpcomp.linalg import (log_mean_exp, log_pseudo_det_gram,
                              spectral_norm_dense, spectral_norm_operator,
                              svd, sym_eig, vector_p_norm)
from sharpcomp.oracles import charpoly_eigenvalues, det_direct


class TestSvd:
    def test_identity(self):
        res = svd(np.eye(3))
        assert np.allclose(res.sigma, [1.0, 1.0, 1.0])

    def test_diagonal_sorted_descending(self):
        res = svd(np.diag([3.0, 4.0]))
        assert np.allclose(res.sigma, [4.0, 3.0])

    def test_reconstruction_random(self, rng):
        a = rng.standard_normal((5, 3))
        res = svd(a)
        err = np.linalg.norm(res.u @ np.diag(res.sigma) @ res.vt - a)
        assert err / np.linalg.norm(a) <= 1e-10

    @pytest.mark.parametrize("shape", [(2, 2), (8, 5), (17, 40), (64, 64)])
    def test_reconstruction_sizes(self, rng, shape):
        a = rng.standard_normal(shape)
        res = svd(a)
        rel = np.linalg.norm(res.u @ np.diag(res.sigma) @ res.vt - a) / np.linalg.norm(a)
        assert rel <= 1e-10
        assert np.all(np.diff(res.sigma) <= 0)
        assert np.all(res.sigma >= 0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractViolation):
            svd(np.array([[1.0, np.nan]]))


class TestSymEig:
    def test_diagonal(self):
        assert np.allclose(sym_eig(np.diag([2.0, 1.0])).eigenvalues, [2.0, 1.0])

    def test_rank_one_gram(self):
        j = np.array([[1.0, 1.0]])
        assert np.allclose(sym_eig(j @ j.T).eigenvalues, [2.0])

    def test_matches_charpoly_oracle(self, rng):
        a = rng.standard_normal((4, 4))
        a = (a + a.T) / 2
        lam = sym_eig(a).eigenvalues
        oracle = charpoly_eigenvalues(a)
        assert np.max(np.abs(lam - oracle)) <= 1e-8

    def test_trace_preserved(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 9))
            a = rng.standard_normal((n, n))
            a = a + a.T
            lam = sym_eig(a).eigenvalues
            assert abs(lam.sum() - np.trace(a)) <= 1e-9 * (1 + abs(np.trace(a)))

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractViolation):
            sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_gram_clamps_tiny_negative(self, rng):
        j = rng.standard_normal((3, 8))
        lam = sym_eig(j @ j.T, gram_psd=True).eigenvalues
        assert np.all(lam >= 0)


class TestSpectralNormOperator:
    def test_diagonal(self):
        d = np.diag([2.0, 5.0])
        assert spectral_norm_operator(lambda v: d @ v, lambda u: d.T @ u, 2, 2) \
            == pytest.approx(5.0, rel=1e-9)

    def test_matches_dense_svd(self, rng):
        a = rng.standard_normal((7, 4))
        got = spectral_norm_operator(lambda v: a @ v, lambda u: a.T @ u, 4, 7)
        assert got == pytest.approx(svd(a).sigma[0], rel=1e-8)

    def test_zero_operator(self):
        z = lambda v: np.zeros(3)
        assert spectral_norm_operator(z, lambda u: np.zeros(4), 4, 3) == 0.0

    def test_rejects_nonlinear(self):
        with pytest.raises(ContractViolation):
            spectral_norm_operator(lambda v: v ** 2, lambda u: u, 3, 3)

    def test_rejects_wrong_adjoint(self, rng):
        a = rng.standard_normal((3, 3))
        with pytest.raises(ContractViolation):
            spectral_norm_operator(lambda v: a @ v, lambda u: a @ u + 1.7 * u, 3, 3)


class TestLogPseudoDetGram:
    def test_diagonal(self):
        assert log_pseudo_det_gram(np.diag([2.0, 3.0])) == pytest.approx(math.log(6))

    def test_wide_row(self):
        # J J^T = [[2]] so half its log-det is log(2)/2
        assert log_pseudo_det_gram(np.array([[1.0, 1.0]])) \
            == pytest.approx(0.5 * math.log(2))

    def test_matches_direct_determinant(self, rng):
        j = rng.standard_normal((3, 8))
        expected = 0.5 * math.log(det_direct(j @ j.T))
        assert log_pseudo_det_gram(j) == pytest.approx(expected, rel=1e-9)

    def test_matches_svd_log_sum(self, rng):
        j = rng.standard_normal((4, 6))
        expected = float(np.sum(np.log(svd(j).sigma[:4])))
        assert log_pseudo_det_gram(j) == pytest.approx(expected, rel=1e-9)

    def test_underflow_sentinel(self):
        assert log_pseudo_det_gram(np.diag([1.0, 0.0])) == float("-inf")
        assert log_pseudo_det_gram(np.diag([1.0, 1e-310])) == float("-inf")


class TestVectorPNorm:
    def test_euclidean(self):
        assert vector_p_norm([3.0, 4.0], 2) == pytest.approx(5.0)

    def test_one_norm(self):
        assert vector_p_norm([3.0, 4.0], 1) == pytest.approx(7.0)

    def test_inf_norm_and_ordering(self):
        v = [3.0, 4.0]
        assert vector_p_norm(v, np.inf) == pytest.approx(4.0)
        assert vector_p_norm(v, 1) >= vector_p_norm(v, 2) >= vector_p_norm(v, np.inf)

    def test_rejects_p_below_one(self):
        with pytest.raises(ContractViolation):
            vector_p_norm([1.0], 0.5)

    def test_norm_monotonicity_sweep(self, rng):
        # 1000 random vectors, every adjacent exponent pair
        ps = [1.0, 1.5, 2.0, 4.0, np.inf]
        for _ in range(1000):
            v = rng.standard_normal(int(rng.integers(1, 12)))
            norms = [vector_p_norm(v, p) for p in ps]
            for lo, hi in zip(norms, norms[1:]):
                assert lo >= hi - 1e-12 * max(1.0, abs(lo))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20),
           st.sampled_from([(1, 2), (1, 4), (1.5, 2), (2, 4), (2, np.inf)]))
    @settings(max_examples=60, deadline=None)
    def test_norm_monotonicity_property(self, vec, pq):
        p, q = pq
        v = np.asarray(vec)
        assert vector_p_norm(v, p) >= vector_p_norm(v, q) - 1e-9 * (1 + vector_p_norm(v, p))


def test_spectral_norm_dense_zero():
    assert spectral_norm_dense(np.zeros((3, 2))) == 0.0


def test_log_mean_exp_with_neg_inf():
    logs = np.array([0.0, float("-inf")])
    # mean of (1, 0) is 0.5
    assert log_mean_exp(logs) == pytest.approx(math.log(0.5))
