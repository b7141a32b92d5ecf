"""Fixed-effects machinery: QR-based restriction matrices, model
transformation, generalized-least-squares coefficients, and the oblique
projection onto the covariate column space.

Variance components in the presence of covariates Z are estimated from
the transformed response R y, where R has orthonormal rows spanning the
orthogonal complement of col(Z).  Quadratic forms in R y are even and
translation-invariant in y, which is what makes the plugged-in
fixed-effect estimator unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .kernels import KernelBasis

RANK_RTOL = 1e-10


class NoResidualSpaceError(ValueError):
    """rank(Z) = n leaves no residual space to estimate from."""


class CovarianceError(ValueError):
    """A covariance matrix required to be positive definite is not."""


@dataclass
class Restriction:
    """r x n matrix R with R Z = 0 and R R^T = I_r, r = n - rank(Z).

    R is unique only up to row rotations/signs; everything downstream is
    invariant to the choice.
    """

    matrix: np.ndarray
    z_rank: int

    @property
    def r(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def dump_csv(self, path) -> None:
        """Debugging aid; not part of any pipeline."""
        np.savetxt(path, self.matrix, delimiter=",")


def _as_design(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise ValueError("Z must be an n x q matrix")
    return Z


def design_rank(Z: np.ndarray) -> int:
    """Rank via column-pivoted QR with tolerance 1e-10 * ||Z||."""
    Z = _as_design(Z)
    R = scipy.linalg.qr(Z, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return 0
    tol = RANK_RTOL * np.linalg.norm(Z, 2)
    return int((diag > tol).sum())


def restriction_matrix(Z: np.ndarray) -> Restriction:
    """Orthonormal basis of col(Z)-perp from the trailing columns of a
    full pivoted QR factorization of Z."""
    Z = _as_design(Z)
    n = Z.shape[0]
    rank = design_rank(Z)
    if rank >= n:
        raise NoResidualSpaceError(f"rank(Z) = {rank} leaves no residual space (n = {n})")
    Q = scipy.linalg.qr(Z, mode="full", pivoting=True)[0]
    return Restriction(matrix=Q[:, rank:].T.copy(), z_rank=rank)


def transform(y: np.ndarray, basis: KernelBasis, restr: Restriction) -> tuple[np.ndarray, KernelBasis]:
    """Map (y, [H_l]) to (R y, [R H_l R^T]); R H_0 R^T is I_r."""
    y = np.asarray(y, dtype=np.float64)
    R = restr.matrix
    if y.shape != (R.shape[1],) or basis.n != R.shape[1]:
        raise ValueError("dimension mismatch between y, basis and restriction")
    y_tilde = R @ y
    matrices = [np.eye(restr.r)] + [R @ H @ R.T for H in basis.matrices[1:]]
    transformed = KernelBasis(
        matrices=matrices,
        monomial_tags=list(basis.monomial_tags),
        coefficients=list(basis.coefficients),
    )
    return y_tilde, transformed


def _solve_spd(V: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(V)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(f"covariance not positive definite: {exc}") from exc
    except scipy.linalg.LinAlgError as exc:
        raise CovarianceError(f"covariance not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve((c, low), B)


def aitken_beta(y: np.ndarray, Z: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Generalized least squares with a plugged-in covariance:
    beta = (Z^T V^{-1} Z)^- Z^T V^{-1} y.

    Uses a pseudo-inverse so rank-deficient designs yield the
    minimum-norm solution; the fitted values Z beta are invariant to
    that choice.  Returns (beta, Z beta).
    """
    y = np.asarray(y, dtype=np.float64)
    Z = _as_design(Z)
    V = np.asarray(V, dtype=np.float64)
    ViZ = _solve_spd(V, Z)
    Viy = _solve_spd(V, y)
    gram = Z.T @ ViZ
    beta = np.linalg.pinv(gram) @ (Z.T @ Viy)
    return beta, Z @ beta


def projection_pv(Z: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Oblique projector P_V = Z (Z^T V^{-1} Z)^- Z^T V^{-1}.

    Idempotent with P_V Z = Z; I - P_V maps y to the GLS residual.
    """
    Z = _as_design(Z)
    V = np.asarray(V, dtype=np.float64)
    ViZ = _solve_spd(V, Z)
    gram = Z.T @ ViZ
    return Z @ np.linalg.pinv(gram) @ ViZ.T
