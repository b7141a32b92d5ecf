"""Minimum-norm quadratic unbiased estimation of variance components.

Given a covariance basis Var[y] = sum_l theta_l H_l with H_0 = I, each
component is estimated by a quadratic form y^T A_i y.  With equal working
weights the closed form is

    A_i = sum_l eta^(i)_l W H_l W,      W = (sum_l H_l)^{-1},

where eta^(i) solves Gamma eta = e_i and Gamma_ij = tr(W H_i W H_j).
The solve enforces tr(A_i H_j) = delta_ij, the defining unbiasedness
constraint, for any symmetric W -- so the ridge jitter applied to a
near-singular working matrix never biases the estimators.

Negative estimates clamp to zero, except the error component: a
negative y^T A_0 y is replaced by the quadratic form in the projection
of A_0 onto the PSD cone, which is nonnegative for every y.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import KernelBasis, psd_project, symmetrize

logger = logging.getLogger(__name__)

RIDGE_EPS = 1e-10
GAMMA_RCOND = 1e-12
ERROR_FLOOR_RTOL = 1e-12
UNBIASEDNESS_ATOL = 1e-8


class UnidentifiableBasisError(ValueError):
    """The Gamma system is singular: basis monomials are dependent."""

    def __init__(self, message: str, tags: list[str] | None = None):
        super().__init__(message)
        self.tags = tags or []


@dataclass
class MinqueSystem:
    """Precomputed quadratic-form matrices for a fixed basis.

    Immutable after construction; ``estimate`` is a pair of quadratic
    forms per component, so one system serves many responses.
    """

    basis: KernelBasis
    gamma: np.ndarray
    a_matrices: list[np.ndarray]
    working_inverse: np.ndarray
    ridge_applied: bool = False

    @property
    def size(self) -> int:
        return len(self.a_matrices)


@dataclass
class VarianceComponents:
    """Estimated theta with theta[0] the error variance.

    ``theta_raw`` keeps the unclamped quadratic forms (the exactly
    unbiased quantities); ``theta`` applies the sign policy.
    """

    theta: np.ndarray
    theta_raw: np.ndarray
    clamped_indices: list[int] = field(default_factory=list)
    error_projected: bool = False
    error_floored: bool = False
    ridge_applied: bool = False

    @property
    def phi(self) -> float:
        return float(self.theta[0])

    def to_dict(self) -> dict:
        return {
            "theta": [float(t) for t in self.theta],
            "theta_raw": [float(t) for t in self.theta_raw],
            "clamped_indices": list(self.clamped_indices),
            "error_projected": self.error_projected,
            "error_floored": self.error_floored,
            "ridge_applied": self.ridge_applied,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _dependent_tags(gamma: np.ndarray, tags: list[str]) -> list[str]:
    eigenvalues, vectors = np.linalg.eigh(gamma)
    scale = max(eigenvalues.max(), 1e-300)
    involved: set[str] = set()
    for idx in np.flatnonzero(np.abs(eigenvalues) <= GAMMA_RCOND * scale):
        v = np.abs(vectors[:, idx])
        for tag_idx in np.flatnonzero(v > 0.1 * v.max()):
            involved.add(tags[tag_idx])
    return sorted(involved)


def build_system(basis: KernelBasis) -> MinqueSystem:
    """Assemble Gamma, solve for every target, and form the A_i matrices.

    The working matrix V* = sum_l H_l is inverted through its
    eigendecomposition; when its smallest eigenvalue falls below
    1e-10 * trace/n a ridge of that size is added first (recorded on the
    returned system).

    Raises
    ------
    UnidentifiableBasisError
        When Gamma is singular beyond rcond 1e-12; the message names the
        dependent monomials.
    """
    n = basis.n
    v_star = np.zeros((n, n))
    for H in basis.matrices:
        v_star += H
    v_star = (v_star + v_star.T) / 2.0

    eigenvalues, Q = np.linalg.eigh(v_star)
    ridge = RIDGE_EPS * max(abs(np.trace(v_star)) / n, 1e-300)
    ridge_applied = bool(eigenvalues[0] < ridge)
    if ridge_applied:
        logger.warning(
            "working matrix near-singular (min eig %.3e); adding ridge %.3e",
            eigenvalues[0], ridge,
        )
        eigenvalues = eigenvalues + ridge
    working_inverse = (Q / eigenvalues) @ Q.T
    working_inverse = (working_inverse + working_inverse.T) / 2.0

    wh = [working_inverse @ H for H in basis.matrices]
    size = basis.size
    gamma = np.empty((size, size))
    for i in range(size):
        for j in range(i, size):
            gamma[i, j] = gamma[j, i] = float(np.sum(wh[i] * wh[j].T))

    gamma_eigs = np.linalg.eigvalsh(gamma)
    if gamma_eigs[0] <= GAMMA_RCOND * max(gamma_eigs[-1], 1e-300):
        tags = _dependent_tags(gamma, basis.monomial_tags)
        raise UnidentifiableBasisError(
            f"variance-component basis unidentifiable: Gamma is singular "
            f"(dependent monomials: {', '.join(tags) or 'unknown'})",
            tags=tags,
        )

    etas = np.linalg.solve(gamma, np.eye(size))
    a_matrices = []
    for i in range(size):
        combo = np.zeros((n, n))
        for l in range(size):
            combo += etas[l, i] * basis.matrices[l]
        a = working_inverse @ combo @ working_inverse
        a_matrices.append(symmetrize(a, rtol=1e-8, what=f"A_{i}"))
    return MinqueSystem(
        basis=basis,
        gamma=gamma,
        a_matrices=a_matrices,
        working_inverse=working_inverse,
        ridge_applied=ridge_applied,
    )


def estimate(system: MinqueSystem, y: np.ndarray) -> VarianceComponents:
    """Evaluate theta_i = y^T A_i y with the sign policy applied.

    Signal components (i >= 1) clamp at zero with the index recorded.
    A negative error estimate is recomputed through the PSD projection
    of A_0 and, if that lands at (numerical) zero, floored at
    1e-12 * var(y) so downstream division by phi stays defined.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (system.basis.n,):
        raise ValueError(f"y must have length {system.basis.n}")
    raw = np.array([float(y @ A @ y) for A in system.a_matrices])
    theta = raw.copy()

    clamped = [int(i) for i in range(1, theta.size) if theta[i] < 0.0]
    theta[1:] = np.maximum(theta[1:], 0.0)

    error_projected = False
    if theta[0] < 0.0:
        projected = psd_project(system.a_matrices[0], rtol=1e-8)
        theta[0] = float(y @ projected @ y)
        error_projected = True

    floor = ERROR_FLOOR_RTOL * float(np.var(y))
    error_floored = False
    if theta[0] < floor:
        theta[0] = floor
        error_floored = True
        if floor > 0.0:
            logger.info("error component floored at %.3e", floor)

    return VarianceComponents(
        theta=theta,
        theta_raw=raw,
        clamped_indices=clamped,
        error_projected=error_projected,
        error_floored=error_floored,
        ridge_applied=system.ridge_applied,
    )
