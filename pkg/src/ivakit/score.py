"""Score functions, score covariances and the elliptical kappa.

For an elliptical density ``p(y) ∝ h(y^T S^{-1} y)`` the score is
``phi(y) = g(u) S^{-1} y`` with ``u = y^T S^{-1} y`` and
``g(u) = -2 h'(u) / h(u)``.  The multivariate power exponential (MPE) family
uses ``h(u) = exp(-u**beta / 2)`` so that ``g(u) = beta * u**(beta - 1)``.

All radial moments are computed by adaptive quadrature against the
unnormalized radial density ``p(r) ∝ r**(K-1) * h(r**2)`` and divided by its
integral, so no closed-form normalizing constant is trusted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate, special

from .core import Family, SourceModel, as_generator, check_spd

QUAD_TOL = 1e-8


@dataclass(frozen=True)
class ScoreEval:
    """Score matrix for a block of columns.

    Attributes
    ----------
    phi : ndarray, shape (K, V)
        Score ``-d log p / d y`` for each column.
    log_density : float or None
        Sum of the column log densities, excluding the additive
        normalizing constant of the family.
    """

    phi: np.ndarray
    log_density: Optional[float] = None


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    rho: float
    quadrature_abs_error: float


# --------------------------------------------------------------------------
# radial quadrature


def _log_radial_integral(beta: float, power: float) -> tuple[float, float]:
    """``log ∫_0^∞ r**(power-1) exp(-r**(2 beta)/2) dr`` and its relative error.

    Integrates in ``x = log r`` where the integrand is the smooth unimodal
    ``exp(power*x - exp(2 beta x)/2)``.  The integrand is rescaled by its
    peak value so the quadrature sees numbers of order one.
    """
    if power <= 0:
        return np.inf, np.inf
    x0 = np.log(power / beta) / (2 * beta)
    log_peak = power * x0 - 0.5 * np.exp(2 * beta * x0)

    def f(x):
        return np.exp(power * x - 0.5 * np.exp(2 * beta * x) - log_peak)

    # left tail decays like exp(power*x), right tail doubly exponentially
    lo = x0 - 60.0 / power
    hi = x0 + np.log(1.0 + 80.0 / power) / (2 * beta) + 2.0 / beta
    val, err = integrate.quad(f, lo, hi, points=[x0], epsabs=0.0, epsrel=1e-13, limit=200)
    return log_peak + np.log(val), err / val


def radial_moment(beta: float, k_datasets: int, p: float) -> tuple[float, float]:
    """``E[r**p]`` for the MPE radius in dimension K, with an absolute error estimate."""
    log_num, e_num = _log_radial_integral(beta, k_datasets + p)
    log_den, e_den = _log_radial_integral(beta, k_datasets)
    if not np.isfinite(log_num):
        return np.inf, np.inf
    value = float(np.exp(log_num - log_den))
    return value, value * (e_num + e_den)


@lru_cache(maxsize=256)
def _mpe_rho_cached(beta: float, k: int) -> tuple[float, float]:
    m2, err = radial_moment(beta, k, 2.0)
    return m2 / k, err / k


def mpe_rho(beta: float, k_datasets: int) -> float:
    """Covariance-to-dispersion ratio ``rho = E[r^2]/K`` of the MPE family."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return _mpe_rho_cached(float(beta), int(k_datasets))[0]


def mpe_log_normalizer(beta: float, k_datasets: int) -> float:
    """``log ∫ exp(-|x|^(2 beta)/2) dx`` over R^K, the log normalizer at unit dispersion."""
    k = int(k_datasets)
    log_surface = np.log(2.0) + 0.5 * k * np.log(np.pi) - special.gammaln(0.5 * k)
    return float(log_surface + _log_radial_integral(float(beta), k)[0])


def kappa_elliptical(beta: float, k_datasets: int, dispersion=None) -> KappaResult:
    """Non-Gaussianity scalar kappa of a K-dimensional MPE vector.

    ``kappa = rho * E[g(r^2)^2 r^2] / K``, so that the score covariance is
    ``kappa * R^{-1}`` with ``R = rho * Sigma``.  The value does not depend on
    the dispersion matrix; if one is given it is only validated.

    Parameters
    ----------
    beta : float
        Shape parameter, ``beta > 0``.
    k_datasets : int
        Dimension K.  K=1 gives the scalar ICA quantity ``E[phi^2] * var``.
    dispersion : array_like, optional
        K x K dispersion matrix, checked for positive definiteness.

    Returns
    -------
    KappaResult
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    k = int(k_datasets)
    if k < 1:
        raise ValueError("k_datasets must be positive")
    if dispersion is not None:
        disp = check_spd(dispersion, "dispersion")
        if disp.shape != (k, k):
            raise ValueError(f"dispersion must be {k} x {k}")
    beta = float(beta)
    rho, rho_err = _mpe_rho_cached(beta, k)
    # g(r^2)^2 r^2 = beta^2 r^(4 beta - 2)
    m, m_err = radial_moment(beta, k, 4 * beta - 2)
    if not np.isfinite(m):
        raise ValueError(f"kappa diverges for beta={beta}, K={k}")
    kappa = beta**2 * rho * m / k
    err = beta**2 * (rho_err * m + rho * m_err) / k
    if not err < QUAD_TOL:
        raise ArithmeticError(f"kappa quadrature did not converge (abs error {err:.3g})")
    return KappaResult(kappa=float(kappa), rho=float(rho), quadrature_abs_error=float(err))


def kappa_closed_form(beta: float, k_datasets: int) -> float:
    """Gamma-function expression for the MPE kappa, used as a cross-check."""
    a = k_datasets / (2.0 * beta)
    return float(4 * beta**2 / k_datasets**2 * np.exp(
        special.gammaln(a + 2 - 1 / beta) + special.gammaln(a + 1 / beta) - 2 * special.gammaln(a)))


# --------------------------------------------------------------------------
# scores


def _as_columns(y, k):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != k:
        raise ValueError(f"expected columns of length {k}, got shape {y.shape}")
    return y


def gaussian_score(y_columns, covariance) -> ScoreEval:
    """Score ``R^{-1} y`` of a zero-mean Gaussian with covariance R."""
    r = check_spd(covariance, "covariance")
    y = _as_columns(y_columns, r.shape[0])
    chol = np.linalg.cholesky(r)
    z = np.linalg.solve(chol, y)
    phi = np.linalg.solve(chol.T, z)
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    log_density = -0.5 * float(np.sum(z * z)) - 0.5 * y.shape[1] * logdet
    return ScoreEval(phi=phi, log_density=log_density)


def mpe_score(y_columns, beta: float, dispersion) -> ScoreEval:
    """MPE score ``g(u) Sigma^{-1} y`` with ``g(u) = beta u^(beta-1)``.

    Raises
    ------
    ValueError
        If ``beta < 1`` and a column is exactly zero, where the score is
        singular.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    s = check_spd(dispersion, "dispersion")
    y = _as_columns(y_columns, s.shape[0])
    chol = np.linalg.cholesky(s)
    z = np.linalg.solve(chol, y)
    u = np.sum(z * z, axis=0)
    if beta < 1 and np.any(u == 0):
        raise ValueError("score undefined at origin")
    with np.errstate(divide="ignore", invalid="ignore"):
        g = beta * u ** (beta - 1) if beta != 1 else np.ones_like(u)
    g = np.where(u == 0, 0.0 if beta > 1 else g, g)
    phi = np.linalg.solve(chol.T, z) * g
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    log_density = -0.5 * float(np.sum(u**beta)) - 0.5 * y.shape[1] * logdet
    return ScoreEval(phi=phi, log_density=log_density)


def model_score(model: SourceModel, y_columns) -> ScoreEval:
    """Per-sample score of a model's marginal column density."""
    if model.family is Family.MPE:
        return mpe_score(y_columns, model.shape_beta, model.dispersion)
    return gaussian_score(y_columns, model.covariance())


@dataclass(frozen=True)
class GammaEstimate:
    """Monte-Carlo estimate of ``E[phi phi^T]`` with entrywise standard errors."""

    gamma: np.ndarray
    stderr: np.ndarray
    n_draws: int


def estimate_gamma_mc(model: SourceModel, n_draws: int, rng, chunk: int = 200_000) -> GammaEstimate:
    """Estimate the score covariance of ``model`` from ``n_draws`` samples.

    Draws are processed in chunks so memory stays bounded for large M.
    """
    from .sources import sample_scv

    if n_draws < 10_000:
        raise ValueError("n_draws must be at least 1e4")
    gen = as_generator(rng)
    k = model.k_datasets
    s1 = np.zeros((k, k))
    s2 = np.zeros((k, k))
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        if model.family is Family.VECTOR_MA:
            # per-sample marginal is Gaussian with the lag-0 covariance
            y = np.linalg.cholesky(model.covariance()) @ gen.standard_normal((k, m))
        else:
            y = sample_scv(model, m, gen).data
        phi = model_score(model, y).phi
        outer = phi[:, None, :] * phi[None, :, :]
        s1 += outer.sum(axis=2)
        s2 += (outer**2).sum(axis=2)
        done += m
    mean = s1 / n_draws
    var = np.maximum(s2 / n_draws - mean**2, 0.0)
    return GammaEstimate(gamma=mean, stderr=np.sqrt(var / n_draws), n_draws=int(n_draws))
