import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ivakit.core import (DatasetEnsemble, DemixingEnsemble, RngHandle, SourceComponentMatrix, SourceModel,
                         check_spd, direct_sum, hadamard_quotient_trace)

from conftest import random_spd


def test_direct_sum_examples():
    np.testing.assert_array_equal(direct_sum([[[2]], [[3]]]), [[2, 0], [0, 3]])
    np.testing.assert_array_equal(direct_sum([np.eye(2), np.eye(3)]), np.eye(5))
    np.testing.assert_array_equal(direct_sum([[[1, 2], [3, 4]], [[5]]]),
                                  [[1, 2, 0], [3, 4, 0], [0, 0, 5]])


def test_direct_sum_rejects_empty_and_nonsquare():
    with pytest.raises(ValueError, match="empty direct sum"):
        direct_sum([])
    with pytest.raises(ValueError):
        direct_sum([np.ones((2, 3))])


square = st.integers(1, 4).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-3, 3, allow_nan=False)))


@given(st.lists(square, min_size=1, max_size=4))
def test_direct_sum_determinant_and_associativity(blocks):
    ds = direct_sum(blocks)
    assert np.isclose(np.linalg.det(ds), np.prod([np.linalg.det(b) for b in blocks]),
                      rtol=1e-8, atol=1e-8)
    if len(blocks) >= 2:
        nested = direct_sum([direct_sum(blocks[:1]), direct_sum(blocks[1:])])
        np.testing.assert_array_equal(ds, nested)


def test_hadamard_quotient_trace_examples():
    assert hadamard_quotient_trace(np.eye(2), np.ones((2, 2)), np.ones((2, 2))) == 2
    a = [[2, 0], [0, 3]]
    assert hadamard_quotient_trace(a, [[1, 4], [4, 1]], [[1, 2], [2, 1]]) == 5


def test_hadamard_quotient_trace_matches_loop(gen):
    for _ in range(10):
        a, c, d = (random_spd(3, gen) for _ in range(3))
        brute = sum(a[i, i] * c[i, i] / d[i, i] for i in range(3))
        assert np.isclose(hadamard_quotient_trace(a, c, d), brute, rtol=1e-14)


def test_hadamard_quotient_trace_zero_anywhere_in_divisor():
    d = np.ones((2, 2))
    d[0, 1] = 0.0
    with pytest.raises(ValueError, match="Hadamard division by zero"):
        hadamard_quotient_trace(np.eye(2), np.ones((2, 2)), d)


def test_check_spd_rejects_bad_matrices():
    with pytest.raises(ValueError, match="symmetric"):
        check_spd([[1, 2], [0, 1]])
    with pytest.raises(ValueError, match="positive definite"):
        check_spd([[1, 1], [1, 1]])
    with pytest.raises(ValueError, match="square"):
        check_spd(np.ones((2, 3)))


def test_rng_handle_reproducible_and_independent():
    a = RngHandle(7, 3).generator().standard_normal(5)
    b = RngHandle(7, 3).generator().standard_normal(5)
    c = RngHandle(7, 4).generator().standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert RngHandle(7, 1).spawn(2) == RngHandle(7, 1).spawn(2)
    assert RngHandle(7, 1).spawn(2) != RngHandle(7, 1).spawn(3)
    with pytest.raises(ValueError):
        RngHandle(-1)


def test_dataset_ensemble_reconstruction_invariant(gen):
    s = gen.standard_normal((2, 3, 50))
    a = gen.standard_normal((2, 3, 3)) + 3 * np.eye(3)
    x = np.einsum("kij,kjv->kiv", a, s)
    srcs = [SourceComponentMatrix(s[:, i, :]) for i in range(3)]
    ens = DatasetEnsemble(x, a, srcs)
    assert ens.shape == (2, 3, 50)
    np.testing.assert_array_equal(ens.source_array(), s)
    with pytest.raises(ValueError, match="X != A S"):
        DatasetEnsemble(x + 1e-3, a, srcs)
    with pytest.raises(ValueError, match="singular"):
        DatasetEnsemble(x, np.zeros((2, 3, 3)))


def test_demixing_ensemble_apply(gen):
    w = gen.standard_normal((2, 3, 3)) + 3 * np.eye(3)
    x = DatasetEnsemble(gen.standard_normal((2, 3, 10)))
    y = DemixingEnsemble(w).apply(x)
    np.testing.assert_allclose(y[1], w[1] @ x.observations[1])
    with pytest.raises(ValueError, match="does not match"):
        DemixingEnsemble(w[:1]).apply(x)


def test_source_model_validation():
    with pytest.raises(ValueError, match="beta"):
        SourceModel.mpe(0.0, np.eye(2))
    with pytest.raises(ValueError, match="empty tap list"):
        SourceModel.vector_ma(np.zeros((0, 2, 2)))
    assert SourceModel.mpe(1.0, np.eye(2)).is_gaussian
    assert not SourceModel.mpe(2.0, np.eye(2)).is_gaussian
    assert not SourceModel.vector_ma(np.ones((2, 2, 2)) * np.eye(2)).iid


def test_vector_ma_lag_covariance_direct_sum(gen):
    taps = gen.standard_normal((3, 2, 2))
    m = SourceModel.vector_ma(taps)
    for lag in range(4):
        direct = sum(taps[j + lag] @ taps[j].T for j in range(3 - lag)) if lag < 3 else np.zeros((2, 2))
        np.testing.assert_allclose(m.lag_covariance(lag), direct, atol=1e-12)
    full = m.full_covariance(5)
    # sample-major layout: block (v1, v2) is the lag (v1 - v2) covariance
    np.testing.assert_allclose(full[2:4, 0:2], m.lag_covariance(1), atol=1e-12)
