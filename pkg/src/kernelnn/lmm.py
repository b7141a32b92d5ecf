"""Linear mixed model baseline: REML via Fisher scoring, BLUP, and the
closed-form average prediction error.

The model is y = Z beta + a + eps with a ~ N(0, sum_l tau_l K_l) and
eps ~ N(0, tau_err I).  Scoring iterates on the restricted likelihood;
components stepping negative are truncated at 1e-10 to keep V
invertible.  When the error component is driven to (numerical) zero the
BLUP collapses onto the observed response -- a known degeneracy that is
reported through a flag rather than hidden.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import KernelMatrix

logger = logging.getLogger(__name__)

COMPONENT_FLOOR = 1e-10
DEGENERACY_RTOL = 1e-8
MAX_STEP_HALVINGS = 10


@dataclass
class FittedLmm:
    """REML estimates plus the scoring trace.

    ``tau`` holds the kernel components (length L), ``tau_err`` the
    error variance.  ``converged`` means the final max |score| fell
    below tolerance; a capped run returns converged=False with the
    trace preserved for inspection.
    """

    tau: np.ndarray
    tau_err: float
    beta: np.ndarray | None
    converged: bool
    iterations: int
    trace: list[dict] = field(default_factory=list)
    damped: bool = False
    kernel_labels: list[str] = field(default_factory=list)

    def components(self) -> np.ndarray:
        """Full component vector (tau_1, ..., tau_L, tau_err)."""
        return np.append(self.tau, self.tau_err)

    def to_dict(self) -> dict:
        return {
            "tau": [float(t) for t in self.tau],
            "tau_err": float(self.tau_err),
            "beta": None if self.beta is None else [float(b) for b in self.beta],
            "converged": self.converged,
            "iterations": self.iterations,
            "damped": self.damped,
            "kernel_labels": list(self.kernel_labels),
            "trace": self.trace,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _kernel_values(kernels: list[KernelMatrix] | list[np.ndarray]) -> list[np.ndarray]:
    return [K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
            for K in kernels]


def _builders(kernels: list[np.ndarray], n: int) -> list[np.ndarray]:
    return kernels + [np.eye(n)]


def _build_v(builders: list[np.ndarray], comps: np.ndarray) -> np.ndarray:
    V = np.zeros_like(builders[0])
    for c, M in zip(comps, builders):
        V += c * M
    return V


def _projection(V: np.ndarray, Z: np.ndarray | None) -> tuple[np.ndarray, float]:
    """REML projection P = V^{-1} - V^{-1} Z (Z^T V^{-1} Z)^- Z^T V^{-1}
    and the log pseudo-determinant of Z^T V^{-1} Z."""
    Vi = np.linalg.inv(V)
    Vi = (Vi + Vi.T) / 2.0
    if Z is None:
        return Vi, 0.0
    ViZ = Vi @ Z
    gram = Z.T @ ViZ
    gram_eigs = np.linalg.eigvalsh(gram)
    tol = 1e-12 * max(gram_eigs[-1], 1e-300)
    logdet_gram = float(np.log(gram_eigs[gram_eigs > tol]).sum())
    P = Vi - ViZ @ np.linalg.pinv(gram) @ ViZ.T
    return (P + P.T) / 2.0, logdet_gram


def _reml_objective(builders, comps, y, Z) -> float:
    V = _build_v(builders, comps)
    sign, logdet_v = np.linalg.slogdet(V)
    if sign <= 0:
        return -np.inf
    P, logdet_gram = _projection(V, Z)
    return -0.5 * (logdet_v + logdet_gram + float(y @ P @ y))


def reml_fit(
    y: np.ndarray,
    Z: np.ndarray | None,
    kernels: list[KernelMatrix] | list[np.ndarray],
    max_iter: int = 100,
    gtol: float = 1e-6,
) -> FittedLmm:
    """Fisher-scoring REML for components (tau_1..tau_L, tau_err).

    Score_i = -1/2 [tr(P M_i) - y^T P M_i P y] and information
    I_ij = 1/2 tr(P M_i P M_j) over builders M = (K_1..K_L, I).  Steps
    that would lower the restricted likelihood are halved up to 10
    times; a singular information matrix triggers a ridge-damped step
    (recorded as ``damped``).  Components never drop below 1e-10; a
    floored component whose score points further negative is pinned and
    the step taken on the free block only, so boundary optima converge
    instead of exhausting the iteration cap.  A pinned component whose
    score turns positive re-enters the free set.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if Z is not None:
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != n:
            raise ValueError("Z and y dimensions disagree")
        if np.linalg.matrix_rank(Z) >= n:
            raise ValueError("rank(Z) must be below n")
    kvals = _kernel_values(kernels)
    for K in kvals:
        if K.shape != (n, n):
            raise ValueError("kernel dimensions must match y")
    builders = _builders(kvals, n)
    n_comp = len(builders)

    var_y = float(np.var(y))
    if var_y <= 0.0:
        beta = None
        if Z is not None:
            beta = np.linalg.pinv(Z.T @ Z) @ (Z.T @ y)
        return FittedLmm(
            tau=np.zeros(len(kvals)), tau_err=0.0, beta=beta, converged=True,
            iterations=0, trace=[], kernel_labels=_labels(kernels),
        )

    comps = np.full(n_comp, var_y / n_comp)
    damped = False
    trace: list[dict] = []
    converged = False
    iteration = 0
    objective = _reml_objective(builders, comps, y, Z)

    for iteration in range(1, max_iter + 1):
        V = _build_v(builders, comps)
        P, _ = _projection(V, Z)
        Py = P @ y
        pm = [P @ M for M in builders]
        score = np.array([
            -0.5 * (np.trace(pm_i) - float(y @ pm_i @ Py)) for pm_i in pm
        ])
        info = np.empty((n_comp, n_comp))
        for i in range(n_comp):
            for j in range(i, n_comp):
                info[i, j] = info[j, i] = 0.5 * float(np.sum(pm[i] * pm[j].T))

        max_score = float(np.abs(score).max())
        trace.append({"iteration": iteration, "objective": float(objective),
                      "max_score": max_score})
        # active set: components pinned at the floor whose score points
        # further negative stay fixed; scoring runs on the free block
        free = ~((comps <= COMPONENT_FLOOR) & (score < 0.0))
        free_max = float(np.abs(score[free]).max()) if free.any() else 0.0
        if free_max < gtol:
            converged = True
            break

        n_free = int(free.sum())
        info_ff = info[np.ix_(free, free)]
        info_eigs = np.linalg.eigvalsh(info_ff)
        delta = np.zeros(n_comp)
        if info_eigs[0] <= 1e-12 * max(info_eigs[-1], 1e-300):
            damped = True
            ridge = 1e-8 * max(np.trace(info_ff) / n_free, 1e-300)
            logger.warning("singular REML information matrix; damping step with ridge %.3e", ridge)
            delta[free] = np.linalg.solve(info_ff + ridge * np.eye(n_free), score[free])
        else:
            delta[free] = np.linalg.solve(info_ff, score[free])

        step = delta
        for _ in range(MAX_STEP_HALVINGS + 1):
            proposal = np.maximum(comps + step, COMPONENT_FLOOR)
            new_objective = _reml_objective(builders, proposal, y, Z)
            if new_objective >= objective or np.allclose(proposal, comps):
                break
            step = step / 2.0
        comps = np.maximum(comps + step, COMPONENT_FLOOR)
        objective = _reml_objective(builders, comps, y, Z)

    beta = None
    if Z is not None:
        V = _build_v(builders, comps)
        Vi = np.linalg.inv(V)
        gram = Z.T @ Vi @ Z
        beta = np.linalg.pinv(gram) @ (Z.T @ Vi @ y)

    if not converged:
        logger.info("REML hit the iteration cap (%d) with max |score| %.3e",
                    iteration, trace[-1]["max_score"] if trace else np.nan)
    return FittedLmm(
        tau=comps[:-1].copy(),
        tau_err=float(comps[-1]),
        beta=beta,
        converged=converged,
        iterations=iteration,
        trace=trace,
        damped=damped,
        kernel_labels=_labels(kernels),
    )


def _labels(kernels) -> list[str]:
    out = []
    for i, K in enumerate(kernels):
        out.append(K.label if isinstance(K, KernelMatrix) and K.label else f"K{i + 1}")
    return out


def blup_matrix(kernels: list[KernelMatrix] | list[np.ndarray],
                tau: np.ndarray, tau_err: float) -> np.ndarray:
    """Shrinkage matrix (sum_l tau_l K_l)(sum_l tau_l K_l + tau_err I)^{-1}."""
    kvals = _kernel_values(kernels)
    n = kvals[0].shape[0]
    signal = np.zeros((n, n))
    for t, K in zip(np.atleast_1d(tau), kvals):
        signal += t * K
    M = np.linalg.solve(signal + tau_err * np.eye(n), signal).T
    return (M + M.T) / 2.0


def blup(
    fitted: FittedLmm,
    y: np.ndarray,
    Z: np.ndarray | None,
    kernels: list[KernelMatrix] | list[np.ndarray],
) -> tuple[np.ndarray, bool]:
    """Best linear unbiased prediction
    Z beta + (sum tau_l K_l)(sum tau_l K_l + tau_err I)^{-1} (y - Z beta).

    Returns (prediction, degenerate).  ``degenerate`` is True when the
    error component is negligible relative to the total variance, in
    which case the shrinkage matrix is numerically the identity and the
    prediction collapses onto y.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    fixed = np.zeros(n)
    if Z is not None:
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[:, None]
        if fitted.beta is None:
            raise ValueError("fit carried no covariates but Z was supplied")
        fixed = Z @ fitted.beta
    resid = y - fixed

    total = float(fitted.tau.sum() + fitted.tau_err)
    if total <= 0.0:
        return fixed, False
    degenerate = fitted.tau_err <= DEGENERACY_RTOL * total
    if degenerate:
        logger.warning(
            "error component %.3e is ~0 relative to total %.3e; BLUP collapses onto y",
            fitted.tau_err, total,
        )
    if not fitted.tau.size or float(np.abs(fitted.tau).sum()) == 0.0:
        return fixed, degenerate
    M = blup_matrix(kernels, fitted.tau, fitted.tau_err)
    return fixed + M @ resid, degenerate


def pe_closed_form(sigma_tilde_sq: float, eigenvalues: np.ndarray, phi: float) -> float:
    """Average prediction error of the best predictor in the LMM:
    phi * sum_i (sigma_tilde^2 * lambda_i + 1)^{-1}."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if (eigenvalues < 0).any():
        raise ValueError("eigenvalues must be nonnegative")
    if phi <= 0:
        raise ValueError("phi must be positive")
    if sigma_tilde_sq < 0:
        raise ValueError("sigma_tilde_sq must be nonnegative")
    return float(phi * np.sum(1.0 / (sigma_tilde_sq * eigenvalues + 1.0)))
