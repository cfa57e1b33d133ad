import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import toeplitz

from ivakit.core import SourceModel
from ivakit.ident import (check_common_permutation, check_iva_identifiability_general,
                          check_iva_identifiability_iid, diag_similar, gaussian_subsets, verify_fim_singularity)

from conftest import random_corr, random_spd


def test_diag_similar_examples(gen):
    r = random_spd(3, gen)
    np.testing.assert_allclose(diag_similar(r, r), np.eye(3))
    np.testing.assert_allclose(diag_similar(4 * r, r), 2 * np.eye(3))


def _exhaustive(rm, rn):
    k = rm.shape[0]
    mag = np.sqrt(np.diag(rm) / np.diag(rn))
    for signs in itertools.product([1.0], *[[1.0, -1.0]] * (k - 1)):
        d = np.diag(mag * np.array(signs))
        if np.allclose(d @ rn @ d, rm, atol=1e-8):
            return d
    return None


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.booleans(), st.integers(0, 2**31))
def test_diag_similar_agrees_with_sign_search(k, similar, seed):
    gen = np.random.default_rng(seed)
    rn = random_spd(k, gen)
    if similar:
        d = np.diag(gen.choice([-1.0, 1.0], k) * gen.uniform(0.3, 3, k))
        rm = d @ rn @ d
    else:
        rm = random_corr(k, gen)
    found, brute = diag_similar(rm, rn), _exhaustive(rm, rn)
    assert (found is None) == (brute is None)
    if found is not None:
        np.testing.assert_allclose(found @ rn @ found, rm, atol=1e-8)
        assert found[0, 0] > 0


def test_diag_similar_block_structure():
    # two disconnected components: the sign of each is fixed separately
    rn = np.array([[1, .5, 0, 0], [.5, 1, 0, 0], [0, 0, 1, -.2], [0, 0, -.2, 1]])
    d = np.diag([1.0, 1.0, -2.0, -2.0])
    np.testing.assert_allclose(np.abs(diag_similar(d @ rn @ d, rn)), np.abs(d))


def test_iid_gaussian_identity_pair():
    v = check_iva_identifiability_iid([SourceModel.gaussian(np.eye(3))] * 2)
    assert not v.identifiable
    assert v.violations[0].alpha == (0, 1, 2)
    np.testing.assert_allclose(v.violations[0].witness, np.ones(3))


def test_iid_mpe_pair_identifiable(gen):
    v = check_iva_identifiability_iid([SourceModel.mpe(3.0, random_spd(3, gen)) for _ in range(2)])
    assert v.identifiable and v.common_permutation


def test_iid_identity_covariances_flagged_only_at_beta1():
    for beta in (0.5, 1.0, 2.0):
        v = check_iva_identifiability_iid([SourceModel.mpe(beta, np.eye(5))] * 3)
        assert v.identifiable == (beta != 1.0)
        if beta == 1.0:
            assert {x.pair for x in v.violations} == {(0, 1), (0, 2), (1, 2)}


def test_iid_checker_refuses_dependent_samples(gen):
    with pytest.raises(ValueError, match="check_iva_identifiability_general"):
        check_iva_identifiability_iid([SourceModel.vector_ma(gen.standard_normal((2, 2, 2)))] * 2)


def test_general_ica_proportional():
    t = toeplitz(0.6 ** np.arange(6))
    models = [SourceModel.gaussian([[4.0]], sample_covariance=4 * t),
              SourceModel.gaussian([[1.0]], sample_covariance=t)]
    v = check_iva_identifiability_general(models, 6)
    assert not v.identifiable
    assert v.violations[0].witness[0] == pytest.approx(2.0)


def test_general_ica_not_proportional():
    t = toeplitz(0.6 ** np.arange(6))
    models = [SourceModel.gaussian([[1.0]], sample_covariance=t),
              SourceModel.gaussian([[1.0]], sample_covariance=np.eye(6))]
    assert check_iva_identifiability_general(models, 6).identifiable


def test_general_ma_scaled_taps(gen):
    taps = gen.standard_normal((3, 3, 3))
    v = check_iva_identifiability_general([SourceModel.vector_ma(taps), SourceModel.vector_ma(2 * taps)], 100)
    assert not v.identifiable
    np.testing.assert_allclose(v.violations[0].witness, 0.5 * np.ones(3))
    other = SourceModel.vector_ma(gen.standard_normal((3, 3, 3)))
    assert check_iva_identifiability_general([SourceModel.vector_ma(taps), other], 100).identifiable


def test_general_dense_guard(monkeypatch):
    import ivakit.ident as ident
    monkeypatch.setattr(ident, "MAX_DENSE", 8)
    sc = np.eye(10)
    with pytest.raises(ValueError, match="dense limit"):
        check_iva_identifiability_general([SourceModel.gaussian(np.eye(2), sample_covariance=sc)] * 2, 5)


def test_common_permutation_examples(gen):
    full = [SourceModel.mpe(2.0, random_spd(3, gen)) for _ in range(2)]
    assert check_common_permutation(full) == (True, [])
    block = lambda c: np.block([[np.array([[c]]), np.zeros((1, 2))],  # noqa: E731
                                [np.zeros((2, 1)), random_spd(2, gen)]])
    ok, viol = check_common_permutation([SourceModel.gaussian(block(1.0)), SourceModel.gaussian(block(2.0))])
    assert not ok and viol == [((0, 1), (0,))]
    ok, _ = check_common_permutation([SourceModel.gaussian(block(1.0)), SourceModel.gaussian(random_spd(3, gen))])
    assert ok


def test_gaussian_subsets_of_block_model():
    r = np.diag([1.0, 2.0])
    subs = gaussian_subsets(SourceModel.gaussian(r))
    assert set(subs) == {(0,), (1,), (0, 1)}
    assert gaussian_subsets(SourceModel.mpe(2.0, r)) == []


def test_fim_singularity_examples(gen):
    assert verify_fim_singularity([SourceModel.gaussian(np.eye(2))] * 2, 10).singular[(0, 1)]
    rep = verify_fim_singularity([SourceModel.mpe(3.0, random_spd(2, gen)) for _ in range(2)], 10)
    assert not rep.singular[(0, 1)] and rep.min_eigenvalues[(0, 1)] > 1e-3 and rep.agrees
    rn = random_spd(3, gen)
    d = np.diag(gen.choice([-1.0, 1.0], 3) * gen.uniform(0.5, 2, 3))
    rep = verify_fim_singularity([SourceModel.gaussian(d @ rn @ d), SourceModel.gaussian(rn)], 10)
    assert rep.singular[(0, 1)] and rep.agrees
