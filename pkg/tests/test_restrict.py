import numpy as np
import pytest

from kernelnn.kernels import OutputKernelSpec, expand_output_basis
from kernelnn.restrict import (
    CovarianceError,
    NoResidualSpaceError,
    aitken_beta,
    design_rank,
    projection_pv,
    restriction_matrix,
    transform,
)
from conftest import random_psd, random_psd_kernel


def check_identities(R, Z, atol=1e-10):
    np.testing.assert_allclose(R @ Z, 0.0, atol=atol)
    np.testing.assert_allclose(R @ R.T, np.eye(R.shape[0]), atol=atol)


class TestRestrictionMatrix:
    def test_two_sample_intercept(self):
        restr = restriction_matrix(np.ones((2, 1)))
        assert restr.matrix.shape == (1, 2)
        np.testing.assert_allclose(np.abs(restr.matrix), 1.0 / np.sqrt(2.0), atol=1e-12)
        check_identities(restr.matrix, np.ones((2, 1)))

    def test_three_sample_intercept(self):
        Z = np.ones((3, 1))
        restr = restriction_matrix(Z)
        assert restr.matrix.shape == (2, 3)
        check_identities(restr.matrix, Z)

    def test_random_full_rank(self, rng):
        Z = rng.standard_normal((5, 2))
        restr = restriction_matrix(Z)
        assert restr.z_rank == 2 and restr.matrix.shape == (3, 5)
        check_identities(restr.matrix, Z)

    def test_rank_deficient_design(self, rng):
        a = rng.standard_normal(6)
        Z = np.column_stack([a, 2.0 * a, rng.standard_normal(6)])
        restr = restriction_matrix(Z)
        assert restr.z_rank == 2
        assert restr.matrix.shape == (4, 6)
        check_identities(restr.matrix, Z)

    def test_full_rank_square_rejected(self, rng):
        with pytest.raises(NoResidualSpaceError):
            restriction_matrix(rng.standard_normal((4, 4)))

    def test_design_rank_tolerance(self, rng):
        Z = rng.standard_normal((8, 3))
        Z[:, 2] = Z[:, 0] + 1e-14 * rng.standard_normal(8)
        assert design_rank(Z) == 2


class TestTransform:
    def test_identity_maps_to_identity(self, rng):
        Z = np.ones((6, 1))
        basis = expand_output_basis([random_psd_kernel(6, rng)], OutputKernelSpec())
        restr = restriction_matrix(Z)
        _, transformed = transform(rng.standard_normal(6), basis, restr)
        np.testing.assert_allclose(transformed.matrices[0], np.eye(5), atol=1e-10)

    def test_column_space_annihilated(self, rng):
        Z = rng.standard_normal((7, 2))
        restr = restriction_matrix(Z)
        basis = expand_output_basis([random_psd_kernel(7, rng)], OutputKernelSpec())
        y = Z @ rng.standard_normal(2)
        y_tilde, _ = transform(y, basis, restr)
        np.testing.assert_allclose(y_tilde, 0.0, atol=1e-10)

    def test_quadratic_forms_translation_invariant(self, rng):
        n = 9
        Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
        restr = restriction_matrix(Z)
        R = restr.matrix
        theta = rng.standard_normal((restr.r, restr.r))
        theta = theta + theta.T
        y = rng.standard_normal(n)
        base = (R @ y) @ theta @ (R @ y)
        for _ in range(5):
            b = rng.standard_normal(2)
            shifted = (R @ (y + Z @ b)) @ theta @ (R @ (y + Z @ b))
            assert shifted == pytest.approx(base, abs=1e-8 * max(abs(base), 1.0))
        negated = (R @ -y) @ theta @ (R @ -y)
        assert negated == pytest.approx(base, abs=1e-8 * max(abs(base), 1.0))


class TestAitken:
    def test_identity_covariance_is_ols(self, rng):
        Z = rng.standard_normal((12, 3))
        y = rng.standard_normal(12)
        beta, fit = aitken_beta(y, Z, np.eye(12))
        expected = np.linalg.lstsq(Z, y, rcond=None)[0]
        np.testing.assert_allclose(beta, expected, atol=1e-10)
        np.testing.assert_allclose(fit, Z @ expected, atol=1e-10)

    def test_intercept_mean(self, rng):
        y = rng.standard_normal(9)
        beta, _ = aitken_beta(y, np.ones((9, 1)), np.eye(9))
        assert beta[0] == pytest.approx(y.mean())

    def test_gls_oracle(self, rng):
        n = 10
        Z = rng.standard_normal((n, 2))
        V = random_psd(n, rng) + 0.5 * np.eye(n)
        y = rng.standard_normal(n)
        beta, _ = aitken_beta(y, Z, V)
        Vi = np.linalg.inv(V)
        expected = np.linalg.solve(Z.T @ Vi @ Z, Z.T @ Vi @ y)
        np.testing.assert_allclose(beta, expected, atol=1e-10)

    def test_not_positive_definite_rejected(self, rng):
        Z = rng.standard_normal((5, 1))
        with pytest.raises(CovarianceError):
            aitken_beta(rng.standard_normal(5), Z, -np.eye(5))


class TestProjection:
    def test_identity_covariance_orthogonal_projector(self, rng):
        Z = rng.standard_normal((8, 2))
        P = projection_pv(Z, np.eye(8))
        expected = Z @ np.linalg.pinv(Z.T @ Z) @ Z.T
        np.testing.assert_allclose(P, expected, atol=1e-10)

    def test_idempotent_and_reproduces_z(self, rng):
        n = 9
        Z = rng.standard_normal((n, 3))
        V = random_psd(n, rng) + 0.3 * np.eye(n)
        P = projection_pv(Z, V)
        np.testing.assert_allclose(P @ P, P, atol=1e-8)
        np.testing.assert_allclose(P @ Z, Z, atol=1e-8)

    def test_residual_v_orthogonal_to_design(self, rng):
        n = 11
        Z = rng.standard_normal((n, 2))
        V = random_psd(n, rng) + 0.4 * np.eye(n)
        P = projection_pv(Z, V)
        y = rng.standard_normal(n)
        resid = (np.eye(n) - P) @ y
        np.testing.assert_allclose(Z.T @ np.linalg.solve(V, resid), 0.0, atol=1e-8)
