import numpy as np
import pytest

from kernelnn import lmm
from kernelnn.kernels import KernelMatrix, OutputKernelSpec, expand_output_basis
from kernelnn.knn import (
    FittedKnn,
    KnnSpec,
    fit,
    pe_bound_check,
    predict,
    prediction_error,
    predictor_matrix,
    schur_positivity_threshold,
)
from kernelnn.minque import VarianceComponents
from kernelnn.restrict import NoResidualSpaceError
from conftest import random_psd, random_psd_kernel


def manual_fit(kernels, theta, output=None):
    """FittedKnn assembled from given components (no estimation)."""
    basis = expand_output_basis(kernels, output or OutputKernelSpec(kind="identity"))
    theta = np.asarray(theta, dtype=float)
    fitted = FittedKnn(
        theta=VarianceComponents(theta=theta, theta_raw=theta.copy()),
        basis=basis,
        beta=None,
        predictor=np.zeros((basis.n, basis.n)),
        v_hat=basis.reconstruct(theta),
        output=output,
    )
    fitted.predictor = predictor_matrix(fitted)
    return fitted


class TestFit:
    def test_simulate_and_recover_identity(self, rng):
        # identity output kernel: components (phi, tau*xi) recoverable
        n, reps = 80, 300
        K = random_psd_kernel(n, rng, rank=60)
        spec = KnnSpec([K], OutputKernelSpec(kind="identity"))
        truth = np.array([1.0, 2.0])  # phi, theta_K
        root = np.linalg.cholesky(truth[0] * np.eye(n) + truth[1] * K.values)
        raws = np.empty((reps, 2))
        for r in range(reps):
            y = root @ rng.standard_normal(n)
            raws[r] = fit(spec, y).theta.theta_raw
        se = raws.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(raws.mean(axis=0) - truth) <= 3.0 * se)

    def test_noiseless_intercept(self, rng):
        n = 12
        K = random_psd_kernel(n, rng)
        spec = KnnSpec([K], OutputKernelSpec(kind="identity"))
        y = 5.0 * np.ones(n)
        fitted = fit(spec, y, Z=np.ones((n, 1)))
        assert fitted.beta[0] == pytest.approx(5.0, abs=1e-10)
        np.testing.assert_allclose(fitted.theta.theta, 0.0, atol=1e-20)
        np.testing.assert_allclose(predict(fitted, y, np.ones((n, 1))), y, atol=1e-10)

    def test_vhat_is_component_sum(self, rng):
        n = 10
        K = random_psd_kernel(n, rng)
        spec = KnnSpec([K], OutputKernelSpec(kind="polynomial", c=1.0, d=2))
        y = rng.standard_normal(n)
        fitted = fit(spec, y)
        np.testing.assert_allclose(fitted.v_hat,
                                   fitted.basis.reconstruct(fitted.theta.theta),
                                   atol=1e-12)

    def test_poly_output_without_covariates_keeps_ones_monomial(self, rng):
        n = 25
        K = random_psd_kernel(n, rng)
        spec = KnnSpec([K], OutputKernelSpec(kind="polynomial", c=1.0, d=2))
        y = 1.0 + rng.standard_normal(n)
        fitted = fit(spec, y)
        assert fitted.basis.monomial_tags == ["I", "J", "K1", "K1*K1"]
        assert fitted.diagnostics["dropped_monomials"] == []
        assert np.all(fitted.theta.theta >= 0.0)

    def test_intercept_drops_ones_monomial(self, rng):
        n = 30
        K = random_psd_kernel(n, rng)
        spec = KnnSpec([K], OutputKernelSpec(kind="polynomial", c=1.0, d=2))
        y = rng.standard_normal(n)
        fitted = fit(spec, y, Z=np.ones((n, 1)))
        assert fitted.diagnostics["dropped_monomials"] == ["J"]
        j_index = fitted.basis.monomial_tags.index("J")
        assert fitted.theta.theta[j_index] == 0.0

    def test_degenerate_design_rejected(self, rng):
        n = 6
        K = random_psd_kernel(n, rng)
        with pytest.raises(NoResidualSpaceError):
            fit(KnnSpec([K], OutputKernelSpec()), rng.standard_normal(n), Z=np.eye(n))

    def test_dimension_mismatch(self, rng):
        K = random_psd_kernel(5, rng)
        with pytest.raises(ValueError):
            fit(KnnSpec([K], OutputKernelSpec()), rng.standard_normal(6))


class TestPredictorMatrix:
    def test_no_signal_gives_zero(self, rng):
        fitted = manual_fit([random_psd_kernel(7, rng)], [1.3, 0.0])
        np.testing.assert_allclose(fitted.predictor, 0.0, atol=1e-14)
        np.testing.assert_allclose(predict(fitted, rng.standard_normal(7)), 0.0, atol=1e-14)

    def test_scalar_shrinkage_on_identity_kernel(self):
        n, phi, theta1 = 6, 0.8, 1.2
        K = KernelMatrix(np.eye(n), label="eye", psd_checked=True)
        fitted = manual_fit([K], [phi, theta1])
        s = theta1 / phi
        np.testing.assert_allclose(fitted.predictor, s / (s + 1.0) * np.eye(n), atol=1e-12)

    def test_matches_blup_matrix_at_matched_components(self, rng):
        n = 15
        kernels = [random_psd_kernel(n, rng), random_psd_kernel(n, rng)]
        phi, tau = 0.7, np.array([1.1, 0.4])
        fitted = manual_fit(kernels, [phi, *tau])
        expected = lmm.blup_matrix([K.values for K in kernels], tau, phi)
        np.testing.assert_allclose(fitted.predictor, expected, atol=1e-10)

    def test_eigenvalues_in_unit_interval(self, rng):
        fitted = manual_fit([random_psd_kernel(9, rng)], [0.5, 2.0])
        eigenvalues = np.linalg.eigvalsh(fitted.predictor)
        assert np.all(eigenvalues >= -1e-12) and np.all(eigenvalues < 1.0)

    def test_prediction_is_contraction(self, rng):
        fitted = manual_fit([random_psd_kernel(9, rng)], [0.5, 2.0])
        for _ in range(5):
            y = rng.standard_normal(9)
            assert np.linalg.norm(predict(fitted, y)) <= np.linalg.norm(y) + 1e-12


class TestPredict:
    def test_eigenvector_shrinkage(self, rng):
        n = 8
        K = random_psd_kernel(n, rng)
        phi, theta1 = 1.0, 1.5
        fitted = manual_fit([K], [phi, theta1])
        s_hat = theta1 / phi * K.values
        eigenvalues, vectors = np.linalg.eigh(s_hat)
        top, v = eigenvalues[-1], vectors[:, -1]
        np.testing.assert_allclose(predict(fitted, v), top / (top + 1.0) * v, atol=1e-10)

    def test_matches_lmm_blup_at_matched_components(self, rng):
        n = 13
        K = random_psd_kernel(n, rng)
        phi, tau = 0.9, 1.4
        fitted_knn = manual_fit([K], [phi, tau])
        fitted_lmm = lmm.FittedLmm(tau=np.array([tau]), tau_err=phi, beta=None,
                                   converged=True, iterations=1)
        y = rng.standard_normal(n)
        yhat_lmm, _ = lmm.blup(fitted_lmm, y, None, [K])
        np.testing.assert_allclose(predict(fitted_knn, y), yhat_lmm, atol=1e-10)

    def test_covariate_mismatch_rejected(self, rng):
        fitted = manual_fit([random_psd_kernel(5, rng)], [1.0, 1.0])
        with pytest.raises(ValueError):
            predict(fitted, rng.standard_normal(5), Z=np.ones((5, 1)))


class TestPredictionError:
    def test_zero_signal_is_squared_norm(self, rng):
        n = 10
        fitted = manual_fit([random_psd_kernel(n, rng)], [1.0, 0.0])
        y = rng.standard_normal(n)
        pe = prediction_error(fitted, y)
        assert pe.total == pytest.approx(float(y @ y), rel=1e-12)
        assert pe.average == pytest.approx(pe.total / n)

    def test_scalar_case(self, rng):
        n, phi, theta1 = 7, 1.0, 2.0
        K = KernelMatrix(np.eye(n), label="eye", psd_checked=True)
        fitted = manual_fit([K], [phi, theta1])
        y = rng.standard_normal(n)
        expected = float(y @ y) / (theta1 / phi + 1.0) ** 2
        assert prediction_error(fitted, y).total == pytest.approx(expected, rel=1e-10)

    def test_plugin_equals_empirical(self, rng):
        n = 20
        K = random_psd_kernel(n, rng)
        spec = KnnSpec([K], OutputKernelSpec(kind="polynomial", c=1.0, d=2))
        Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = rng.standard_normal(n) + Z @ np.array([1.0, 0.5])
        fitted = fit(spec, y, Z)
        pe = prediction_error(fitted, y, Z)
        assert pe.total == pytest.approx(pe.empirical, abs=1e-10 * max(pe.total, 1.0))


class TestTranslationInvariance:
    def test_components_invariant_under_design_shifts(self, rng):
        n = 40
        K = random_psd_kernel(n, rng)
        spec = KnnSpec([K], OutputKernelSpec(kind="polynomial", c=1.0, d=2))
        Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = rng.standard_normal(n)
        base = fit(spec, y, Z).theta.theta
        scale = max(np.abs(base).max(), 1.0)
        for _ in range(5):
            b = rng.standard_normal(2) * 10.0
            shifted = fit(spec, y + Z @ b, Z).theta.theta
            np.testing.assert_allclose(shifted, base, atol=1e-8 * scale)


class TestSchurThreshold:
    def test_degree_two(self):
        assert schur_positivity_threshold(2) == pytest.approx(0.5)

    def test_degree_three(self):
        assert schur_positivity_threshold(3) == pytest.approx((1.0 / 3.0) ** 0.5)

    def test_degree_below_two_rejected(self):
        with pytest.raises(ValueError):
            schur_positivity_threshold(1)

    def test_eigensweep_above_threshold(self, rng):
        d = 2
        c = schur_positivity_threshold(d)
        for _ in range(100):
            A = rng.uniform(size=(8, 4))
            sigma = A @ A.T
            sigma /= sigma.max()  # PSD with entries in [0, 1]
            gap = (c + sigma) ** d - sigma
            assert np.linalg.eigvalsh((gap + gap.T) / 2.0)[0] >= -1e-8


class TestBoundCheck:
    def test_identity_equal_hypothesis_gives_equality(self, rng):
        K = random_psd_kernel(10, rng)
        report = pe_bound_check([K], xi=np.array([1.0]), tau_tilde=1.3,
                                sigma_tilde_sq=1.3, spec=OutputKernelSpec(kind="identity"))
        assert report.hypothesis_met
        assert report.pe_knn == pytest.approx(report.pe_lmm, rel=1e-10)
        assert report.bound_holds

    def test_polynomial_bound_holds(self, rng):
        for _ in range(20):
            n = int(rng.integers(5, 25))
            kernels = [random_psd_kernel(n, rng)]
            xi = np.array([float(rng.uniform(0.2, 2.0))])
            tau_tilde = float(rng.uniform(0.2, 2.0))
            sigma = tau_tilde * xi[0] * float(rng.uniform(0.1, 1.0))
            report = pe_bound_check(kernels, xi, tau_tilde, sigma,
                                    OutputKernelSpec(kind="polynomial", c=1.0, d=2))
            assert report.hypothesis_met
            assert report.bound_holds

    def test_hypothesis_violation_reported_not_raised(self, rng):
        K = random_psd_kernel(6, rng)
        report = pe_bound_check([K], xi=np.array([1.0]), tau_tilde=1.0,
                                sigma_tilde_sq=2.0, spec=OutputKernelSpec(kind="identity"))
        assert not report.hypothesis_met
        assert report.bound_holds is None
        assert "exceeds" in report.reasons[0]

    def test_phi_scales_both_errors(self, rng):
        K = random_psd_kernel(6, rng)
        r1 = pe_bound_check([K], np.array([1.0]), 1.0, 0.5, OutputKernelSpec(), phi=1.0)
        r2 = pe_bound_check([K], np.array([1.0]), 1.0, 0.5, OutputKernelSpec(), phi=2.0)
        assert r2.pe_knn == pytest.approx(2.0 * r1.pe_knn)
        assert r2.pe_lmm == pytest.approx(2.0 * r1.pe_lmm)
