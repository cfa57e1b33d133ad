import numpy as np
import pytest
from scipy import stats
from scipy.special import gamma as gamma_fn

from ivakit.core import RngHandle, SourceModel
from ivakit.score import mpe_rho, radial_moment
from ivakit.sources import (MixingSpec, load_ensemble, mix, sample_gaussian_scv, sample_mpe_scv,
                            sample_scv, sample_vector_ma, save_ensemble)

from conftest import random_spd


def test_mpe_beta1_is_standard_gaussian(gen):
    s = sample_mpe_scv(SourceModel.mpe(1.0, np.eye(3)), 100_000, gen).data
    cov = np.cov(s)
    se = np.sqrt(2.0 / 100_000)
    assert np.all(np.abs(cov - np.eye(3)) < 4 * se)
    # each coordinate is N(0, 1)
    assert stats.kstest(s[0], "norm").pvalue > 1e-3


def test_mpe_covariance_is_rho_sigma(gen):
    sigma = random_spd(5, gen)
    s = sample_mpe_scv(SourceModel.mpe(6.0, sigma), 200_000, gen).data
    target = mpe_rho(6.0, 5) * sigma
    assert np.linalg.norm(np.cov(s) - target) / np.linalg.norm(target) < 0.02


def test_mpe_radius_distribution(gen):
    # r^(2 beta) / 2 follows Gamma(K / (2 beta)) for identity dispersion
    beta, k = 0.5, 3
    s = sample_mpe_scv(SourceModel.mpe(beta, np.eye(k)), 20_000, gen).data
    t = (np.sum(s**2, axis=0) ** beta) / 2
    assert stats.kstest(t, stats.gamma(k / (2 * beta)).cdf).pvalue > 1e-3


def test_mpe_scalar_kurtosis_matches_quadrature(gen):
    beta = 0.5
    m2 = radial_moment(beta, 1, 2)[0] / radial_moment(beta, 1, 0)[0]
    m4 = radial_moment(beta, 1, 4)[0] / radial_moment(beta, 1, 0)[0]
    excess = m4 / m2**2 - 3
    s = sample_mpe_scv(SourceModel.mpe(beta, np.eye(1)), 1_000_000, gen).data[0]
    # K = 1 is a generalized Gaussian with exponent 2 beta on |x|
    q = 2 * beta
    closed = gamma_fn(5 / q) * gamma_fn(1 / q) / gamma_fn(3 / q) ** 2 - 3
    assert excess == pytest.approx(closed, rel=1e-8)
    assert stats.kurtosis(s) == pytest.approx(excess, rel=0.1)


def test_gaussian_sampler_examples(gen):
    s = sample_gaussian_scv(np.eye(2), 100_000, gen).data
    assert np.all(np.abs(np.cov(s) - np.eye(2)) < 0.02)
    s = sample_gaussian_scv([[1, 0.9], [0.9, 1]], 100_000, gen).data
    assert np.corrcoef(s)[0, 1] == pytest.approx(0.9, abs=0.01)
    a = sample_gaussian_scv(np.eye(2), 10, RngHandle(3).generator()).data
    b = sample_gaussian_scv(np.eye(2), 10, RngHandle(3).generator()).data
    np.testing.assert_array_equal(a, b)


def _lag_cov(s, lag):
    v = s.shape[1]
    return s[:, lag:] @ s[:, :v - lag].T / (v - lag)


def test_vector_ma_white_case(gen):
    s = sample_vector_ma(SourceModel.vector_ma(np.eye(3)[None]), 100_000, gen).data
    assert np.abs(_lag_cov(s, 1)).max() < 4 / np.sqrt(100_000)


def test_vector_ma_lag_covariances(gen):
    taps = gen.standard_normal((4, 3, 3)) / 2
    model = SourceModel.vector_ma(taps)
    s = sample_vector_ma(model, 200_000, gen).data
    scale = np.linalg.norm(model.lag_covariance(0))
    for lag in range(5):
        err = np.linalg.norm(_lag_cov(s, lag) - model.lag_covariance(lag)) / scale
        assert err < 0.03, lag
    assert np.allclose(model.lag_covariance(4), 0)


def test_mix_identity_hook_and_invariant(gen):
    srcs = [sample_scv(SourceModel.mpe(2.0, np.eye(5)), 100, gen) for _ in range(3)]
    ens = mix(srcs, MixingSpec(3, 5, identity=True), gen)
    np.testing.assert_array_equal(ens.observations, ens.source_array())
    ens = mix(srcs, MixingSpec(3, 5), gen)
    recon = np.einsum("kij,kjv->kiv", ens.mixing, ens.source_array())
    np.testing.assert_allclose(recon, ens.observations, rtol=1e-12, atol=1e-12)
    assert all(np.linalg.cond(a) <= 1e6 for a in ens.mixing)


def test_mix_condition_retry_exhausted(gen):
    srcs = [sample_scv(SourceModel.gaussian(np.eye(2)), 10, gen) for _ in range(3)]
    with pytest.raises(RuntimeError, match="after 3 attempts"):
        mix(srcs, MixingSpec(3, 2, max_condition=1.0, max_attempts=3), gen)


def test_mix_shape_errors(gen):
    a = sample_scv(SourceModel.gaussian(np.eye(2)), 10, gen)
    b = sample_scv(SourceModel.gaussian(np.eye(2)), 11, gen)
    with pytest.raises(ValueError, match="disagree"):
        mix([a, b], MixingSpec(2, 2), gen)


def test_ensemble_roundtrip(tmp_path, gen):
    srcs = [sample_scv(SourceModel.vector_ma(gen.standard_normal((2, 3, 3))), 40, gen) for _ in range(3)]
    ens = mix(srcs, MixingSpec(3, 3), gen)
    save_ensemble(ens, tmp_path, {"note": "x"})
    back, meta = load_ensemble(tmp_path)
    np.testing.assert_array_equal(back.observations, ens.observations)
    np.testing.assert_array_equal(back.mixing, ens.mixing)
    np.testing.assert_array_equal(back.source_array(), ens.source_array())
    assert meta["note"] == "x"
