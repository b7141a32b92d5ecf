"""The jitted and numpy inner loops must agree exactly."""

import numpy as np
import pytest

from kernelnn import _accel


def _genotype_like(rng, n=37, p=53, missing=0.1):
    values = rng.integers(0, 3, size=(n, p)).astype(np.float64)
    mask = rng.uniform(size=(n, p)) < missing
    values[mask] = np.nan
    return values


def test_ibs_distance_sums_matches_bruteforce(rng):
    values = rng.integers(0, 3, size=(12, 9)).astype(np.float64)
    expected = np.zeros((12, 12))
    for i in range(12):
        for j in range(12):
            expected[i, j] = np.abs(values[i] - values[j]).sum()
    np.testing.assert_allclose(_accel.ibs_distance_sums_numpy(values), expected, atol=1e-12)


@pytest.mark.skipif(not _accel.USE_NUMBA, reason="numba path disabled")
def test_numba_matches_numpy_ibs(rng):
    values = rng.integers(0, 3, size=(41, 73)).astype(np.float64)
    np.testing.assert_allclose(
        _accel.ibs_distance_sums_numba(values),
        _accel.ibs_distance_sums_numpy(values),
        rtol=1e-12, atol=1e-12,
    )


@pytest.mark.skipif(not _accel.USE_NUMBA, reason="numba path disabled")
def test_numba_matches_numpy_counts(rng):
    values = _genotype_like(rng)
    np.testing.assert_array_equal(
        _accel.genotype_counts_numba(np.ascontiguousarray(values)),
        _accel.genotype_counts_numpy(values),
    )


def test_genotype_counts_ignores_fractional(rng):
    values = np.array([[0.0, 1.0], [2.0, 0.37], [np.nan, 1.0]])
    counts = _accel.genotype_counts_numpy(values)
    np.testing.assert_array_equal(counts[0], [1, 0, 1, 1])
    # imputed-style 0.37 is neither a class nor missing
    np.testing.assert_array_equal(counts[1], [0, 2, 0, 0])


def test_dispatcher_agrees_with_both_paths(rng):
    values = _genotype_like(rng, n=19, p=31)
    np.testing.assert_array_equal(_accel.genotype_counts(values),
                                  _accel.genotype_counts_numpy(values))
    complete = np.nan_to_num(values, nan=1.0)
    np.testing.assert_allclose(_accel.ibs_distance_sums(complete),
                               _accel.ibs_distance_sums_numpy(complete),
                               rtol=1e-12, atol=1e-12)
