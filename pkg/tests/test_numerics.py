import numpy as np
import pytest

from bselect.errors import DimensionMismatch, IndexOutOfRange, NotPositiveDefinite
from bselect.numerics import (
    LowerTriangular,
    cholesky,
    log_softmax,
    logsumexp,
    sample_gaussian,
    softmax_ce_grad,
    solve_psd,
)


def random_spd(n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


class TestCholesky:
    def test_identity(self):
        ell = cholesky(np.eye(2), jitter=0.0)
        np.testing.assert_array_equal(ell.entries, np.eye(2))

    def test_diagonal(self):
        ell = cholesky(np.diag([4.0, 9.0]), jitter=0.0)
        np.testing.assert_allclose(ell.entries, np.diag([2.0, 3.0]))

    def test_reconstruction_random_spd(self):
        # Oracle: multiply the factor back and compare with the input.
        m = random_spd(5, seed=7)
        ell = cholesky(m).entries
        np.testing.assert_allclose(ell @ ell.T, m, rtol=1e-8)

    def test_jitter_argument_is_added(self):
        ell = cholesky(np.zeros((3, 3)), jitter=4.0).entries
        np.testing.assert_allclose(ell @ ell.T, 4.0 * np.eye(3))

    def test_ladder_rescues_marginally_indefinite(self):
        # Symmetric matrix with one eigenvalue a hair below zero.
        q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
        m = q @ np.diag([1.0, 0.5, 0.2, -1e-13]) @ q.T
        m = (m + m.T) / 2
        ell = cholesky(m)
        assert ell.n == 4

    def test_fails_on_clearly_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.diag([1.0, -1.0]))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_nonsquare(self):
        with pytest.raises(DimensionMismatch):
            cholesky(np.ones((2, 3)))


class TestSolvePsd:
    def test_identity_system(self):
        ell = cholesky(np.eye(3))
        e1 = np.array([1.0, 0.0, 0.0])
        np.testing.assert_array_equal(solve_psd(ell, e1), e1)

    def test_diagonal_system(self):
        ell = cholesky(np.diag([4.0, 9.0]))
        np.testing.assert_allclose(solve_psd(ell, np.array([4.0, 9.0])), [1.0, 1.0])

    def test_random_residual(self):
        # Oracle: residual of the reconstructed system.
        m = random_spd(8, seed=3)
        b = np.random.default_rng(4).standard_normal(8)
        x = solve_psd(cholesky(m), b)
        assert np.linalg.norm(m @ x - b) / np.linalg.norm(b) <= 1e-8

    def test_matrix_rhs(self):
        m = random_spd(4, seed=5)
        rhs = np.random.default_rng(6).standard_normal((4, 3))
        x = solve_psd(cholesky(m), rhs)
        np.testing.assert_allclose(m @ x, rhs, rtol=1e-8, atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            solve_psd(cholesky(np.eye(3)), np.ones(4))


class TestSampleGaussian:
    def test_zero_covariance_is_point_mass(self):
        mean = np.array([1.0, -2.0, 3.0])
        draws = sample_gaussian(mean, np.zeros((3, 3)), count=10, seed=0)
        assert draws.shape == (10, 3)
        np.testing.assert_array_equal(draws, np.tile(mean, (10, 1)))

    def test_empirical_moments(self):
        draws = sample_gaussian(np.zeros(3), np.eye(3), count=100_000, seed=11)
        assert np.abs(draws.mean(axis=0)).max() < 0.02
        emp_cov = np.cov(draws.T)
        assert np.abs(emp_cov - np.eye(3)).max() < 0.05

    def test_seed_determinism(self):
        a = sample_gaussian(np.zeros(2), np.eye(2), count=17, seed=42)
        b = sample_gaussian(np.zeros(2), np.eye(2), count=17, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_root_s_convergence(self):
        # Covariance error should shrink roughly like 1/sqrt(S).
        cov = random_spd(3, seed=9)
        errs = {}
        for s in (1_000, 100_000):
            draws = sample_gaussian(np.zeros(3), cov, count=s, seed=13)
            errs[s] = np.abs(np.cov(draws.T) - cov).max()
        assert errs[100_000] < errs[1_000] / 3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            sample_gaussian(np.zeros(2), np.eye(3), count=5, seed=0)


class TestLogSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(log_softmax([0.0, 0.0]), [-np.log(2)] * 2)

    def test_large_logit_does_not_overflow(self):
        out = log_softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        assert abs(out[0]) < 1e-12

    def test_matches_high_precision_oracle(self):
        # Frozen from a 60-digit Decimal evaluation of f_j - ln(sum exp f).
        expected = [-2.40760596444438, -1.4076059644443804, -0.4076059644443803]
        np.testing.assert_allclose(log_softmax([1.0, 2.0, 3.0]), expected, atol=1e-12)

    def test_normalization_property(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            f = rng.standard_normal(rng.integers(2, 9)) * rng.uniform(0.1, 50)
            out = log_softmax(f)
            assert np.all(out <= 0)
            assert abs(np.exp(out).sum() - 1.0) < 1e-12

    def test_batched_rows(self):
        f = np.random.default_rng(3).standard_normal((4, 5))
        out = log_softmax(f, axis=-1)
        for i in range(4):
            np.testing.assert_allclose(out[i], log_softmax(f[i]), atol=1e-15)


class TestLogSumExp:
    def test_against_direct(self):
        a = np.array([0.1, 0.4, -2.0])
        assert abs(logsumexp(a) - np.log(np.exp(a).sum())) < 1e-12

    def test_axis(self):
        a = np.random.default_rng(5).standard_normal((3, 4))
        out = logsumexp(a, axis=1)
        np.testing.assert_allclose(out, [logsumexp(r) for r in a], atol=1e-13)


class TestSoftmaxCeGrad:
    def test_uniform_two_way(self):
        np.testing.assert_allclose(softmax_ce_grad(np.array([0.0, 0.0]), 0), [-0.5, 0.5])

    def test_sums_to_zero(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            k = int(rng.integers(2, 8))
            f = rng.standard_normal(k) * 3
            g = softmax_ce_grad(f, int(rng.integers(k)))
            assert abs(g.sum()) < 1e-12

    def test_matches_finite_differences(self):
        # Oracle: central differences of -log_softmax(f)[y], h = 1e-5.
        rng = np.random.default_rng(41)
        f = rng.standard_normal(5)
        y = 2
        g = softmax_ce_grad(f, y)
        h = 1e-5
        fd = np.zeros(5)
        for j in range(5):
            up, dn = f.copy(), f.copy()
            up[j] += h
            dn[j] -= h
            fd[j] = (-log_softmax(up)[y] + log_softmax(dn)[y]) / (2 * h)
        np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            softmax_ce_grad(np.zeros(3), 3)


class TestLowerTriangular:
    def test_rejects_nonpositive_diagonal(self):
        with pytest.raises(NotPositiveDefinite):
            LowerTriangular(np.diag([1.0, 0.0]))
