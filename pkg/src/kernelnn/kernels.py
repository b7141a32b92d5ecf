"""Kernel matrix construction, polynomial output-kernel expansion, and
positive-semidefinite projection.

An output kernel f maps the hidden-layer Gram matrix entrywise to the
covariance of the genetic effect.  When f satisfies a linear separable
condition -- polynomials do -- f applied to a positive combination of
input kernels decomposes into a fixed list of Hadamard-monomial basis
matrices with coefficients that are monomials in the combination
weights.  ``expand_output_basis`` materializes that list, which is what
the variance-component machinery estimates against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .genotype import CodingStateError, GenotypeMatrix

SYMMETRY_RTOL = 1e-10
PSD_EIG_RTOL = 1e-8


class SymmetryError(ValueError):
    """A matrix expected to be symmetric is asymmetric beyond tolerance."""


class UnsupportedDegreeError(ValueError):
    """Polynomial output kernels are expanded only for degree 1 and 2."""


def symmetrize(values: np.ndarray, rtol: float = SYMMETRY_RTOL, what: str = "matrix") -> np.ndarray:
    """Validate relative symmetry then return (M + M^T) / 2."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"{what} must be square, got shape {values.shape}")
    scale = max(float(np.abs(values).max(initial=0.0)), 1.0)
    gap = float(np.abs(values - values.T).max(initial=0.0))
    if gap > rtol * scale:
        raise SymmetryError(f"{what} asymmetric: max |M - M^T| = {gap:.3e} (scale {scale:.3e})")
    return (values + values.T) / 2.0


def _genotype_values(G: GenotypeMatrix | np.ndarray) -> np.ndarray:
    values = G.values if isinstance(G, GenotypeMatrix) else np.asarray(G, dtype=np.float64)
    if np.isnan(values).any():
        raise ValueError("kernel construction needs complete genotypes; run QC/imputation first")
    return values


@dataclass
class KernelMatrix:
    """Symmetric n x n similarity matrix with a PSD status flag.

    ``psd_checked`` is True when positive semidefiniteness is known,
    either structurally (Gram constructions, Schur products) or from an
    explicit eigenvalue check.
    """

    values: np.ndarray
    label: str = ""
    psd_checked: bool = False

    def __post_init__(self):
        self.values = symmetrize(self.values, what=f"kernel {self.label or '<unnamed>'}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])

    def check_psd(self) -> bool:
        """Empirical PSD check: smallest eigenvalue >= -1e-8 * trace/n."""
        tol = PSD_EIG_RTOL * max(abs(np.trace(self.values)) / self.n, 1e-300)
        self.psd_checked = bool(self.min_eigenvalue() >= -tol)
        return self.psd_checked

    def save(self, path: str | Path) -> None:
        """Dense header-free CSV plus a JSON sidecar with metadata."""
        path = Path(path)
        np.savetxt(path, self.values, delimiter=",")
        sidecar = {"label": self.label, "psd_checked": self.psd_checked, "n": self.n}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "KernelMatrix":
        path = Path(path)
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        sidecar_path = path.with_suffix(path.suffix + ".json")
        label, psd = "", False
        if sidecar_path.exists():
            meta = json.loads(sidecar_path.read_text())
            label = meta.get("label", "")
            psd = bool(meta.get("psd_checked", False))
        return cls(values=values, label=label, psd_checked=psd)


@dataclass
class OutputKernelSpec:
    """Entrywise output-kernel function: identity f(x)=x or polynomial
    f(x) = (c + x)^d."""

    kind: str = "identity"
    c: float = 1.0
    d: int = 2

    def __post_init__(self):
        if self.kind not in ("identity", "polynomial"):
            raise ValueError(f"kind must be 'identity' or 'polynomial', got {self.kind!r}")
        if self.kind == "polynomial":
            if self.c < 0:
                raise ValueError("polynomial offset c must be >= 0")
            if int(self.d) != self.d or self.d < 1:
                raise ValueError("polynomial degree d must be an integer >= 1")
            self.d = int(self.d)

    def apply(self, x: np.ndarray | float) -> np.ndarray | float:
        if self.kind == "identity":
            return x
        return (self.c + x) ** self.d

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        return {"kind": "polynomial", "c": self.c, "d": self.d}

    @classmethod
    def from_dict(cls, data: dict) -> "OutputKernelSpec":
        if data.get("kind") == "polynomial":
            return cls(kind="polynomial", c=float(data.get("c", 1.0)), d=int(data.get("d", 2)))
        return cls(kind="identity")


@dataclass
class KernelBasis:
    """Ordered covariance basis [H_0 = I, H_1, ..., H_L'].

    ``monomial_tags`` name the Hadamard monomial each H_l represents
    ("I", "J", "K1", "K1*K2", ...).  ``coefficients`` carry the symbolic
    weight of each signal matrix as (factor, exponents): the model-implied
    component is tau * factor * prod_l xi_l**exponents[l].  Index 0 (the
    error matrix I) has coefficient None; its component is the error
    variance itself.
    """

    matrices: list[np.ndarray]
    monomial_tags: list[str]
    coefficients: list[tuple[float, tuple[int, ...]] | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.matrices:
            raise ValueError("basis needs at least the identity matrix")
        n = self.matrices[0].shape[0]
        if not np.allclose(self.matrices[0], np.eye(n), atol=1e-10):
            raise ValueError("H_0 must be the identity matrix")
        if len(self.monomial_tags) != len(self.matrices):
            raise ValueError("one tag per basis matrix required")
        if not self.coefficients:
            self.coefficients = [None] * len(self.matrices)
        self.matrices = [symmetrize(H, what=f"basis matrix {t}")
                         for H, t in zip(self.matrices, self.monomial_tags)]

    @property
    def size(self) -> int:
        """Number of basis matrices, L' + 1."""
        return len(self.matrices)

    @property
    def n(self) -> int:
        return self.matrices[0].shape[0]

    def reconstruct(self, theta: np.ndarray) -> np.ndarray:
        """Sum_l theta_l H_l."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"theta must have length {self.size}")
        out = np.zeros((self.n, self.n))
        for t, H in zip(theta, self.matrices):
            out += t * H
        return out

    def model_components(self, tau: float, xi: np.ndarray) -> np.ndarray:
        """Map structural (tau, xi) to the implied component vector theta[1:].

        Only defined for bases produced by ``expand_output_basis``.
        """
        xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
        out = np.empty(self.size - 1)
        for i, coef in enumerate(self.coefficients[1:]):
            if coef is None:
                raise ValueError("basis lacks symbolic coefficients")
            factor, exponents = coef
            out[i] = tau * factor * np.prod(xi ** np.asarray(exponents))
        return out


def product_kernel(X: np.ndarray, label: str = "product") -> KernelMatrix:
    """Normalized Gram matrix p^{-1} X X^T."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError(f"need an n x p matrix with p >= 1, got shape {X.shape}")
    K = X @ X.T / X.shape[1]
    return KernelMatrix(values=K, label=label, psd_checked=True)


def covariance_kernel(G: GenotypeMatrix | np.ndarray, label: str = "covariance") -> KernelMatrix:
    """Row-centered cross-products: K_ij = (p-1)^{-1} sum_k (g_ik - mean_i)(g_jk - mean_j)."""
    values = _genotype_values(G)
    p = values.shape[1]
    if p < 2:
        raise ValueError("covariance kernel needs p >= 2 SNPs")
    centered = values - values.mean(axis=1, keepdims=True)
    K = centered @ centered.T / (p - 1)
    return KernelMatrix(values=K, label=label, psd_checked=True)


def ibs_kernel(G: GenotypeMatrix | np.ndarray, label: str = "ibs") -> KernelMatrix:
    """Normalized identity-by-state: K_ij = (2p)^{-1} sum_k (2 - |g_ik - g_jk|).

    Defined on additive codes; values lie in [0, 1] with unit diagonal.
    PSD is not structural here, so it is checked per instance.
    """
    if isinstance(G, GenotypeMatrix) and G.coding != "additive":
        raise CodingStateError("IBS kernel is defined on additive-coded genotypes")
    values = _genotype_values(G)
    p = values.shape[1]
    S = _accel.ibs_distance_sums(values)
    K = 1.0 - S / (2.0 * p)
    kernel = KernelMatrix(values=K, label=label)
    kernel.check_psd()
    return kernel


def polynomial_input_kernel(
    X: np.ndarray, c: float = 1.0, degree: int = 2, label: str = "poly2"
) -> KernelMatrix:
    """Entrywise polynomial of the product kernel: (c + p^{-1} X X^T)^degree.

    PSD for c >= 0 by the Schur product theorem.
    """
    if c < 0:
        raise ValueError("offset c must be >= 0")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    base = product_kernel(X)
    return KernelMatrix(values=(c + base.values) ** degree, label=label, psd_checked=True)


def hadamard_power(K: KernelMatrix, k: int) -> KernelMatrix:
    """Entrywise k-th power; k = 0 gives the all-ones matrix J.

    Preserves PSD for k >= 1 (Schur product theorem); J is PSD.
    """
    if int(k) != k or k < 0:
        raise ValueError("power k must be an integer >= 0")
    k = int(k)
    values = np.ones_like(K.values) if k == 0 else K.values ** k
    psd = True if k == 0 else K.psd_checked
    suffix = "J" if k == 0 else f"^{k}"
    return KernelMatrix(values=values, label=f"{K.label}{suffix}" if K.label else suffix, psd_checked=psd)


def psd_project(M: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Nearest (Frobenius) positive-semidefinite matrix: clip negative
    eigenvalues of the symmetric input to zero."""
    M = symmetrize(M, rtol=rtol, what="projection input")
    eigenvalues, O = np.linalg.eigh(M)
    clipped = np.maximum(eigenvalues, 0.0)
    projected = (O * clipped) @ O.T
    return (projected + projected.T) / 2.0


def _check_same_dimension(inputs: list[KernelMatrix]) -> int:
    if not inputs:
        raise ValueError("need at least one input kernel (L >= 1)")
    n = inputs[0].n
    for K in inputs[1:]:
        if K.n != n:
            raise ValueError("input kernels must share dimension")
    return n


def expand_output_basis(inputs: list[KernelMatrix], spec: OutputKernelSpec) -> KernelBasis:
    """Hadamard-monomial basis of f applied to a positive combination of
    the input kernels.

    identity f:        [I, K_1, ..., K_L], component l carrying tau*xi_l.
    polynomial d = 1:  [I, J, K_1, ..., K_L]; J carries tau*c.
    polynomial d = 2:  [I, J, K_1, ..., K_L, K_l o K_l' for l <= l'];
                       J carries tau*c^2, K_l carries 2*tau*c*xi_l,
                       K_l o K_l carries tau*xi_l^2, and cross products
                       carry 2*tau*xi_l*xi_l'.

    Degrees above 2 are not expanded.
    """
    n = _check_same_dimension(inputs)
    L = len(inputs)
    eye = np.eye(n)

    def unit(l: int) -> tuple[int, ...]:
        e = [0] * L
        e[l] = 1
        return tuple(e)

    matrices: list[np.ndarray] = [eye]
    tags: list[str] = ["I"]
    coefs: list[tuple[float, tuple[int, ...]] | None] = [None]

    if spec.kind == "identity":
        for l, K in enumerate(inputs):
            matrices.append(K.values)
            tags.append(f"K{l + 1}")
            coefs.append((1.0, unit(l)))
        return KernelBasis(matrices=matrices, monomial_tags=tags, coefficients=coefs)

    if spec.d > 2:
        raise UnsupportedDegreeError(
            f"polynomial output kernels expand only for d in {{1, 2}}, got d = {spec.d}"
        )

    ones = np.ones((n, n))
    if spec.d == 1:
        matrices.append(ones)
        tags.append("J")
        coefs.append((spec.c, tuple([0] * L)))
        for l, K in enumerate(inputs):
            matrices.append(K.values)
            tags.append(f"K{l + 1}")
            coefs.append((1.0, unit(l)))
        return KernelBasis(matrices=matrices, monomial_tags=tags, coefficients=coefs)

    # d == 2: (c*J + sum_l xi_l K_l)^(o2)
    matrices.append(ones)
    tags.append("J")
    coefs.append((spec.c ** 2, tuple([0] * L)))
    for l, K in enumerate(inputs):
        matrices.append(K.values)
        tags.append(f"K{l + 1}")
        coefs.append((2.0 * spec.c, unit(l)))
    for l in range(L):
        for m in range(l, L):
            matrices.append(inputs[l].values * inputs[m].values)
            tags.append(f"K{l + 1}*K{m + 1}")
            exponents = tuple(a + b for a, b in zip(unit(l), unit(m)))
            coefs.append((1.0 if l == m else 2.0, exponents))
    return KernelBasis(matrices=matrices, monomial_tags=tags, coefficients=coefs)
