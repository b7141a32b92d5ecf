import numpy as np
import pytest

from kernelnn.kernels import KernelMatrix


def random_psd(n: int, rng: np.random.Generator, rank: int | None = None,
               scale: float = 1.0) -> np.ndarray:
    """Well-conditioned random PSD matrix (Gram of a Gaussian factor)."""
    k = rank if rank is not None else 2 * n
    A = rng.standard_normal((n, k))
    return scale * (A @ A.T) / k


def random_psd_kernel(n: int, rng: np.random.Generator, label: str = "rand",
                      rank: int | None = None, scale: float = 1.0) -> KernelMatrix:
    return KernelMatrix(values=random_psd(n, rng, rank=rank, scale=scale),
                        label=label, psd_checked=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
