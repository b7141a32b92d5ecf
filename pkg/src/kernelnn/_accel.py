"""Accelerated inner loops for kernel construction and genotype statistics.

The two hot loops in this package are O(n^2 p) pairwise genotype distance
accumulation (IBS kernel) and O(n p) genotype class counting (QC).  Both
carry a numba ``@njit`` implementation and a pure-numpy fallback.  The
numpy path is selected when numba is unavailable or when the environment
variable ``KERNELNN_DISABLE_NUMBA`` is set to a non-empty value other
than ``0``.  Both implementations stay importable so benchmarks and
equivalence tests can compare them directly.
"""

import os

import numpy as np

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _numba_requested() -> bool:
    flag = os.environ.get("KERNELNN_DISABLE_NUMBA", "").strip()
    return flag in ("", "0")


USE_NUMBA = _HAVE_NUMBA and _numba_requested()


def ibs_distance_sums_numpy(values: np.ndarray) -> np.ndarray:
    """Pairwise sums S[i, j] = sum_k |v[i, k] - v[j, k]|.

    Row-at-a-time broadcasting keeps memory at O(n p) instead of the
    O(n^2 p) cube a full broadcast would allocate.
    """
    v = np.ascontiguousarray(values, dtype=np.float64)
    n = v.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        out[i] = np.abs(v[i] - v).sum(axis=1)
    return out


def genotype_counts_numpy(values: np.ndarray) -> np.ndarray:
    """Per-column counts of genotype classes: (n0, n1, n2, n_missing).

    Entries that are neither 0/1/2 nor NaN (e.g. mean-imputed dosages)
    are excluded from every count except the column total, which callers
    recover as ``values.shape[0]``.
    """
    v = np.asarray(values, dtype=np.float64)
    out = np.empty((v.shape[1], 4), dtype=np.int64)
    out[:, 0] = (v == 0.0).sum(axis=0)
    out[:, 1] = (v == 1.0).sum(axis=0)
    out[:, 2] = (v == 2.0).sum(axis=0)
    out[:, 3] = np.isnan(v).sum(axis=0)
    return out


if _HAVE_NUMBA:

    @_njit(cache=True)
    def ibs_distance_sums_numba(values):  # pragma: no cover - jitted
        n, p = values.shape
        out = np.zeros((n, n), dtype=np.float64)
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(p):
                    acc += abs(values[i, k] - values[j, k])
                out[i, j] = acc
                out[j, i] = acc
        return out

    @_njit(cache=True)
    def genotype_counts_numba(values):  # pragma: no cover - jitted
        n, p = values.shape
        out = np.zeros((p, 4), dtype=np.int64)
        # row-major sweep keeps reads contiguous; the (p, 4) counter
        # block stays cache-resident for realistic p
        for i in range(n):
            for j in range(p):
                v = values[i, j]
                if np.isnan(v):
                    out[j, 3] += 1
                elif v == 0.0:
                    out[j, 0] += 1
                elif v == 1.0:
                    out[j, 1] += 1
                elif v == 2.0:
                    out[j, 2] += 1
        return out


def ibs_distance_sums(values: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return ibs_distance_sums_numba(np.ascontiguousarray(values, dtype=np.float64))
    return ibs_distance_sums_numpy(values)


def genotype_counts(values: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return genotype_counts_numba(np.ascontiguousarray(values, dtype=np.float64))
    return genotype_counts_numpy(values)
