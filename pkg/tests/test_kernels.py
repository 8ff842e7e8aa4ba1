import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import cholesky

from glucoctx.exceptions import InputShapeError, NumericInputError
from glucoctx.kernels import (
    KernelParams,
    cross_kernel,
    kernel_grad_hyper,
    kernel_grad_latent,
    kernel_matrix,
    kernel_matrix_nojitter,
    latent_grad_from_bracket,
    median_inv_lengthscale,
    rbf,
)


def brute_kernel(X, params):
    n = X.shape[0]
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            K[i, j] = params.signal_var * math.exp(-params.inv_lengthscale / 2 * sum((X[i] - X[j]) ** 2))
    return K + params.jitter * np.eye(n)


def random_params(rng, jitter=1e-6):
    return KernelParams(rng.uniform(-1, 1), rng.uniform(-1.5, 1), jitter)


class TestKernelParams:
    def test_defaults_are_unit(self):
        p = KernelParams()
        assert p.signal_var == 1.0 and p.inv_lengthscale == 1.0

    def test_from_values_jitter_relative_to_signal(self):
        p = KernelParams.from_values(4.0, 0.5)
        assert p.jitter == pytest.approx(4e-6)
        assert p.signal_var == pytest.approx(4.0)

    @pytest.mark.parametrize("jitter", [-1e-9, 0.011])
    def test_jitter_range(self, jitter):
        with pytest.raises(NumericInputError):
            KernelParams(0.0, 0.0, jitter)

    @pytest.mark.parametrize("field", ["log_signal_var", "log_inv_lengthscale"])
    def test_overflowing_log_parameter_rejected(self, field):
        with pytest.raises(NumericInputError):
            KernelParams(**{field: 1e6})

    def test_nan_rejected(self):
        with pytest.raises(NumericInputError):
            KernelParams(float("nan"), 0.0)


class TestRbf:
    def test_zero_distance(self):
        assert rbf([1.0, 2.0], [1.0, 2.0], KernelParams.from_values(2.0, 3.0)) == 2.0

    def test_unit_distance(self):
        # 1 * exp(-2 / 2 * 1)
        assert rbf([0.0], [1.0], KernelParams.from_values(1.0, 2.0)) == pytest.approx(0.36787944117144233, rel=1e-15)

    def test_symmetric(self, rng):
        p = KernelParams.from_values(1.7, 0.3)
        for _ in range(100):
            a, b = rng.normal(size=(2, 3))
            assert rbf(a, b, p) == rbf(b, a, p)

    def test_range(self, rng):
        p = KernelParams.from_values(1.7, 0.3)
        a, b = rng.normal(size=(2, 4))
        assert 0 < rbf(a, b, p) <= 1.7

    def test_dimension_mismatch(self):
        with pytest.raises(InputShapeError):
            rbf([1.0, 2.0], [1.0], KernelParams())


class TestKernelMatrix:
    def test_single_point(self):
        K = kernel_matrix(np.array([[0.3, -1.0]]), KernelParams(0.0, 0.0, 0.0))
        np.testing.assert_array_equal(K.values, [[1.0]])

    def test_duplicate_rows_rank_deficient(self):
        p = KernelParams.from_values(2.5, 1.0, jitter=0.0)
        K = kernel_matrix(np.array([[1.0, 2.0], [1.0, 2.0]]), p).values
        np.testing.assert_array_equal(K, np.full((2, 2), 2.5))
        assert np.linalg.matrix_rank(K) == 1

    def test_matches_brute_force(self, rng):
        X = rng.normal(size=(5, 3))
        p = random_params(rng)
        np.testing.assert_allclose(kernel_matrix(X, p).values, brute_kernel(X, p), rtol=0, atol=1e-14)

    def test_records_params(self):
        p = KernelParams(0.1, 0.2)
        assert kernel_matrix(np.zeros((2, 1)), p).params_used is p

    def test_nonfinite_input(self):
        with pytest.raises(NumericInputError):
            kernel_matrix(np.array([[0.0], [np.inf]]), KernelParams())

    @settings(max_examples=40, deadline=None)
    @given(X=arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 4)),
                    elements=st.floats(-50, 50)),
           log_s=st.floats(-3, 3), log_l=st.floats(-4, 2))
    def test_invariants(self, X, log_s, log_l):
        p = KernelParams(log_s, log_l, 1e-6)
        K = kernel_matrix(X, p).values
        assert np.max(np.abs(K - K.T)) <= 1e-12
        np.testing.assert_array_equal(np.diag(K), np.full(X.shape[0], p.signal_var + p.jitter))

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(1, 200), d=st.integers(1, 3), scale=st.sampled_from([1e-3, 1.0, 10.0]),
           seed=st.integers(0, 2 ** 32 - 1))
    def test_cholesky_succeeds_with_small_jitter(self, n, d, scale, seed):
        # tightly clustered points give an almost all-ones kernel, the hardest case
        X = np.random.default_rng(seed).normal(size=(n, d)) * scale
        cholesky(kernel_matrix(X, KernelParams(0.0, 0.0, 1e-8)).values, lower=True)

    def test_cross_kernel_matches_matrix(self, rng):
        X = rng.normal(size=(6, 2))
        p = KernelParams(0.3, -0.2, 0.0)
        np.testing.assert_allclose(cross_kernel(X, X, p), kernel_matrix_nojitter(X, p), atol=1e-15)

    def test_cross_kernel_dimension_mismatch(self):
        with pytest.raises(InputShapeError):
            cross_kernel(np.zeros((2, 2)), np.zeros((2, 3)), KernelParams())


def fd_latent(X, p, i, step=1e-6):
    n, d = X.shape
    out = np.zeros((n, n, d))
    for m in range(d):
        Xp, Xm = X.copy(), X.copy()
        Xp[i, m] += step
        Xm[i, m] -= step
        out[:, :, m] = (kernel_matrix(Xp, p).values - kernel_matrix(Xm, p).values) / (2 * step)
    return out


class TestKernelGradLatent:
    def test_single_point_is_zero(self):
        np.testing.assert_array_equal(kernel_grad_latent(np.array([[0.4, 1.0]]), KernelParams(), 0), 0.0)

    def test_matches_finite_differences(self, rng):
        X = rng.normal(size=(4, 2))
        p = random_params(rng)
        for i in range(4):
            assert np.max(np.abs(kernel_grad_latent(X, p, i) - fd_latent(X, p, i))) <= 1e-6

    def test_random_instances(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            n, d = int(r.integers(1, 9)), int(r.integers(1, 4))
            X = r.normal(size=(n, d))
            p = random_params(r)
            i = int(r.integers(0, n))
            assert np.max(np.abs(kernel_grad_latent(X, p, i) - fd_latent(X, p, i))) <= 1e-6

    def test_antisymmetry(self, rng):
        X = rng.normal(size=(5, 3))
        p = random_params(rng)
        i, j = 1, 3
        np.testing.assert_allclose(kernel_grad_latent(X, p, i)[i, j], -kernel_grad_latent(X, p, j)[i, j],
                                   rtol=1e-14)

    def test_sparsity(self, rng):
        X = rng.normal(size=(5, 2))
        G = kernel_grad_latent(X, random_params(rng), 2)
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, :] = mask[:, 2] = True
        assert np.all(G[~mask] == 0)

    def test_index_error(self):
        with pytest.raises(IndexError):
            kernel_grad_latent(np.zeros((3, 1)), KernelParams(), 3)

    def test_contracted_form_matches_tensor(self, rng):
        X = rng.normal(size=(6, 2))
        p = random_params(rng)
        G = rng.normal(size=(6, 6))
        G = G + G.T
        dense = np.stack([np.einsum("ab,abm->m", G, kernel_grad_latent(X, p, i)) for i in range(6)])
        np.testing.assert_allclose(latent_grad_from_bracket(X, p, G), dense, rtol=1e-12, atol=1e-12)


class TestKernelGradHyper:
    def test_diagonals(self, rng):
        X = rng.normal(size=(4, 2))
        p = random_params(rng)
        dS, dL = kernel_grad_hyper(X, p)
        np.testing.assert_allclose(np.diag(dS), p.signal_var, rtol=1e-15)
        np.testing.assert_array_equal(np.diag(dL), 0.0)

    def test_finite_differences(self):
        step = 1e-6
        for seed in range(20):
            r = np.random.default_rng(seed)
            X = r.normal(size=(int(r.integers(1, 9)), int(r.integers(1, 4))))
            p = random_params(r, jitter=0.0)
            analytic = kernel_grad_hyper(X, p)
            for k in range(2):
                up = p.with_log_values(p.to_array() + step * np.eye(2)[k])
                dn = p.with_log_values(p.to_array() - step * np.eye(2)[k])
                fd = (kernel_matrix(X, up).values - kernel_matrix(X, dn).values) / (2 * step)
                assert np.max(np.abs(fd - analytic[k])) <= 1e-6


def test_median_heuristic():
    X = np.array([[0.0], [1.0], [3.0]])  # squared distances 1, 9, 4
    assert median_inv_lengthscale(X) == pytest.approx(0.25)
    assert median_inv_lengthscale(np.ones((3, 2))) == 1.0
