"""Separation algorithms: maximum-likelihood IVA with MPE sources and JDIAG-SOS.

IVA-MPE
    Minimizes the negative log-likelihood per sample

        J(W) = sum_n [ (1/V) sum_v 0.5 (y_n(v)^T S_n^{-1} y_n(v))^beta_n + 0.5 log det S_n ]
               - sum_k log |det W^[k]|,

    where ``y_n(v)`` is the n-th estimated SCV at sample v.  In the default
    *profile* mode the dispersion is tied to the current estimate,
    ``S_n = C_n / rho_n`` with ``C_n = Y_n Y_n^T / V``, so it never has to be
    iterated separately.  Directions are relative updates
    ``W <- W - mu D W`` where ``D`` solves the 2K x 2K Fisher system of each
    source pair (Fisher scoring), and ``mu`` comes from a line search that
    starts at 1, doubles while the cost keeps dropping and halves when it
    does not.

JDIAG-SOS
    Whitens each dataset and then finds orthogonal ``U^[k]`` minimizing the
    off-diagonal energy of ``U^[k1] C^[k1,k2](l) U^[k2]^T`` over dataset
    pairs and lags ``0..L-1`` by cyclic Jacobi rotations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import special_ortho_group

from .core import DatasetEnsemble, DemixingEnsemble, as_generator, inv_sqrtm_spd
from .score import mpe_log_normalizer, mpe_rho

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitOptions:
    """Settings shared by the fitting routines.

    ``beta_candidates`` holds a single shape parameter when it is known, or
    several candidates to choose from per source.
    """

    max_iterations: int = 2048
    tolerance: float = 1e-7
    initial_step: float = 1.0
    whiten: bool = True
    beta_candidates: tuple = (2.0,)
    restarts: int = 1

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if len(self.beta_candidates) == 0:
            raise ValueError("need at least one beta candidate")
        if any(not b > 0 for b in self.beta_candidates):
            raise ValueError("beta candidates must be > 0")
        if self.restarts < 1 or self.max_iterations < 1:
            raise ValueError("restarts and max_iterations must be >= 1")
        object.__setattr__(self, "beta_candidates", tuple(float(b) for b in self.beta_candidates))


@dataclass
class FitResult:
    demixing: DemixingEnsemble
    objective_trace: list
    beta: Optional[tuple]
    converged: bool
    iterations: int
    restarts_used: int = 0
    extras: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# objective and gradient


def _demix(w, x):
    return np.einsum("kij,kjv->kiv", w, x)


def _betas(beta, n):
    b = np.broadcast_to(np.asarray(beta, dtype=float), (n,))
    if np.any(b <= 0):
        raise ValueError("beta must be > 0")
    return b


def _logdet_w(w):
    sign, ld = np.linalg.slogdet(w)
    if np.any(sign == 0) or not np.all(np.isfinite(ld)):
        raise np.linalg.LinAlgError("singular demixing matrix")
    return float(ld.sum())


def _profile_terms(y_n, beta, rho, want_phi):
    """Cost and effective score of one SCV under the profile dispersion ``C/rho``."""
    v = y_n.shape[1]
    c = y_n @ y_n.T / v
    c_inv = np.linalg.inv(c)
    z = c_inv @ y_n
    u = np.einsum("kv,kv->v", y_n, z)
    cost = rho**beta / (2 * v) * np.sum(u**beta) + 0.5 * np.linalg.slogdet(c)[1]
    if not want_phi:
        return cost, None
    w = rho**beta * beta * u ** (beta - 1)
    m = (z * w) @ z.T / v
    # derivative through C adds (C^{-1} - M) y
    return cost, w * z + (c_inv - m) @ y_n


def _fixed_terms(y_n, beta, sigma, want_phi):
    v = y_n.shape[1]
    s_inv = np.linalg.inv(sigma)
    z = s_inv @ y_n
    u = np.einsum("kv,kv->v", y_n, z)
    cost = np.sum(u**beta) / (2 * v) + 0.5 * np.linalg.slogdet(sigma)[1]
    if not want_phi:
        return cost, None
    return cost, beta * u ** (beta - 1) * z


def _evaluate(w, x, betas, dispersions=None, want_phi=False):
    y = _demix(w, x)
    n = y.shape[1]
    total = -_logdet_w(w)
    phi = np.empty_like(y) if want_phi else None
    for i in range(n):
        if dispersions is None:
            c, p = _profile_terms(y[:, i, :], betas[i], mpe_rho(betas[i], y.shape[0]), want_phi)
        else:
            c, p = _fixed_terms(y[:, i, :], betas[i], np.asarray(dispersions[i], dtype=float), want_phi)
        total += c
        if want_phi:
            phi[:, i, :] = p
    return total, y, phi


def _arrays(w, x):
    wa = w.matrices if isinstance(w, DemixingEnsemble) else np.asarray(w, dtype=float)
    xa = x.observations if isinstance(x, DatasetEnsemble) else np.asarray(x, dtype=float)
    if wa.shape[0] != xa.shape[0] or wa.shape[2] != xa.shape[1]:
        raise ValueError("demixing and data shapes do not match")
    return wa, xa


def iva_objective(w, x, beta, dispersions=None) -> float:
    """Cost ``J(W)`` minimized by :func:`fit_iva_mpe`.

    Parameters
    ----------
    w : DemixingEnsemble or ndarray (K, N, N)
    x : DatasetEnsemble or ndarray (K, N, V)
    beta : float or sequence of N floats
    dispersions : sequence of N (K, K) arrays, optional
        Fixed dispersion matrices.  When omitted each one is profiled out as
        ``Y_n Y_n^T / (V rho_n)``.
    """
    wa, xa = _arrays(w, x)
    return _evaluate(wa, xa, _betas(beta, wa.shape[1]), dispersions)[0]


def iva_gradient(w, x, beta, dispersions=None) -> np.ndarray:
    """Gradient of :func:`iva_objective`, ``(1/V) Phi^[k] X^[k]^T - W^[k]^{-T}``."""
    wa, xa = _arrays(w, x)
    _, _, phi = _evaluate(wa, xa, _betas(beta, wa.shape[1]), dispersions, want_phi=True)
    v = xa.shape[2]
    return np.einsum("kiv,kjv->kij", phi, xa) / v - np.transpose(np.linalg.inv(wa), (0, 2, 1))


def source_cost(y_n, beta: float) -> float:
    """Normalized negative log-likelihood per sample of one SCV under MPE(beta).

    The dispersion is set to ``C / rho``; the normalizing constant is
    included so that different shape parameters can be compared.
    """
    k = y_n.shape[0]
    cost, _ = _profile_terms(y_n, beta, mpe_rho(beta, k), False)
    return float(cost + mpe_log_normalizer(beta, k) - 0.5 * k * np.log(mpe_rho(beta, k)))


# --------------------------------------------------------------------------
# IVA-MPE


def _whitening(x):
    v = x.shape[2]
    return np.stack([inv_sqrtm_spd(xk @ xk.T / v) for xk in x])


def _scoring_direction(y, phi):
    """Per-pair Fisher-scoring direction for the relative update."""
    k_ds, n, v = y.shape
    e = np.einsum("kiv,kjv->kij", phi, y) / v - np.eye(n)
    gam = [phi[:, i, :] @ phi[:, i, :].T / v for i in range(n)]
    cov = [y[:, i, :] @ y[:, i, :].T / v for i in range(n)]
    d = np.zeros_like(e)
    eye = np.eye(k_ds)
    for a in range(n):
        for b in range(a + 1, n):
            h = np.block([[gam[a] * cov[b], eye], [eye, gam[b] * cov[a]]])
            rhs = np.concatenate([e[:, a, b], e[:, b, a]])
            try:
                step = np.linalg.solve(h, rhs)
                if not step @ rhs > 0:
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                step = rhs
            d[:, a, b] = step[:k_ds]
            d[:, b, a] = step[k_ds:]
    # the scale of each source is profiled out, so diagonal moves are not needed
    return d, e


def _descend(xw, w0, betas, opts: FitOptions):
    w = w0.copy()
    j, y, phi = _evaluate(w, xw, betas, want_phi=True)
    trace = [j]
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        d, e = _scoring_direction(y, phi)
        dw = np.einsum("kij,kjl->kil", d, w)
        mu = opts.initial_step
        w_new = w - mu * dw
        try:
            j_new = _evaluate(w_new, xw, betas)[0]
        except np.linalg.LinAlgError:
            j_new = np.inf
        if j_new <= j:
            while mu < 1e4:
                w2 = w - 2 * mu * dw
                try:
                    j2 = _evaluate(w2, xw, betas)[0]
                except np.linalg.LinAlgError:
                    break
                if not j2 < j_new:
                    break
                mu, w_new, j_new = 2 * mu, w2, j2
        else:
            while not j_new <= j and mu > 1e-12:
                mu *= 0.5
                w_new = w - mu * dw
                try:
                    j_new = _evaluate(w_new, xw, betas)[0]
                except np.linalg.LinAlgError:
                    j_new = np.inf
            if not j_new <= j:
                # no descent left at working precision
                converged = bool(np.abs(e).max() < 1e-6)
                break
        rel = np.linalg.norm(w_new - w) / np.linalg.norm(w)
        w = w_new
        j, y, phi = _evaluate(w, xw, betas, want_phi=True)
        trace.append(j)
        if rel < opts.tolerance:
            converged = True
            break
    return w, trace, converged, it


def normalize_demixing(w, x, mixing=None) -> np.ndarray:
    """Scale each estimated source to unit variance and fix its sign.

    With ground-truth mixing the sign makes the largest-magnitude entry of
    the matching row of ``G = W A`` positive; otherwise the first nonzero
    entry of the row of W is made positive.
    """
    w = np.array(w, dtype=float)
    y = _demix(w, x)
    w /= np.sqrt(np.mean(y**2, axis=2))[:, :, None]
    if mixing is not None:
        g = np.einsum("kij,kjl->kil", w, mixing)
        ref = np.take_along_axis(g, np.abs(g).argmax(axis=2)[:, :, None], axis=2)[:, :, 0]
    else:
        first = (np.abs(w) > 0).argmax(axis=2)
        ref = np.take_along_axis(w, first[:, :, None], axis=2)[:, :, 0]
    w *= np.where(ref < 0, -1.0, 1.0)[:, :, None]
    return w


def _polar(a):
    p, _, qt = np.linalg.svd(a)
    return p @ qt


def _initial_rotation(xw):
    """Orthogonal start computed from the whitened data alone.

    Dataset 0 is rotated onto the singular vectors of its cross-covariance
    with dataset 1 (signs fixed by the third moment of each projection) and
    every other dataset onto the resulting projections by orthogonal
    Procrustes.  Whitened data of a transformed problem ``M^[k] X^[k]`` are a
    rotation of the original ones, and this start rotates along, so the
    sequence of global matrices does not depend on ``M^[k]``.
    """
    k, n, v = xw.shape
    if k == 1:
        return np.eye(n)[None]
    u0, _, _ = np.linalg.svd(xw[0] @ xw[1].T / v)
    y0 = u0.T @ xw[0]
    u0 = u0 * np.where(np.sum(y0**3, axis=1) < 0, -1.0, 1.0)
    y0 = u0.T @ xw[0]
    rots = [u0.T] + [_polar(xw[j] @ y0.T / v).T for j in range(1, k)]
    return np.stack(rots)


def _fit_fixed_beta(xw, betas, opts, gen):
    k, n, _ = xw.shape
    best = None
    restarts = 0
    start = _initial_rotation(xw)
    for attempt in range(opts.restarts):
        if attempt == 0:
            w0 = start.copy()
        else:
            w0 = np.stack([special_ortho_group.rvs(n, random_state=gen) if n > 1 else np.eye(1)
                           for _ in range(k)])
            w0 = np.einsum("kij,kjl->kil", w0, start)
            restarts += 1
        try:
            w, trace, conv, it = _descend(xw, w0, betas, opts)
        except np.linalg.LinAlgError:
            log.debug("singular iterate, restarting")
            continue
        # a restart must win clearly; ties within rounding keep the earlier, deterministic start
        if best is None or trace[-1] < best[1][-1] - 1e-9 * max(1.0, abs(best[1][-1])):
            best = (w, trace, conv, it)
    if best is None:
        raise np.linalg.LinAlgError("every restart hit a singular iterate")
    return best + (restarts,)


def fit_iva_mpe(x: DatasetEnsemble, opts: FitOptions = FitOptions(), rng=None) -> FitResult:
    """Fit IVA with MPE source models.

    With one shape parameter in ``opts.beta_candidates`` every source uses
    it.  With several, each candidate is fit for all sources from the same
    start; the branch with the lowest normalized cost is kept, every source
    is assigned the candidate that fits it best, and the fit is refined
    with that assignment.

    Returns
    -------
    FitResult
        ``demixing`` maps the original (unwhitened) observations to unit
        variance source estimates.
    """
    xa = x.observations if isinstance(x, DatasetEnsemble) else np.asarray(x, dtype=float)
    k, n, v = xa.shape
    if v <= n:
        raise ValueError("need more samples than sources")
    gen = as_generator(rng if rng is not None else 0)
    q = _whitening(xa) if opts.whiten else np.tile(np.eye(n), (k, 1, 1))
    xw = _demix(q, xa)
    cands = opts.beta_candidates

    if len(cands) == 1:
        betas = np.full(n, cands[0])
        w, trace, conv, it, restarts = _fit_fixed_beta(xw, betas, opts, gen)
    else:
        branches = []
        for b in cands:
            w_b, tr_b, conv_b, it_b, rs_b = _fit_fixed_beta(xw, np.full(n, b), opts, gen)
            y = _demix(w_b, xw)
            costs = np.array([[source_cost(y[:, i, :], c) for c in cands] for i in range(n)])
            branches.append((costs.min(axis=1).sum() - _logdet_w(w_b), w_b, costs, tr_b, it_b, rs_b))
        _, w_start, costs, trace, it, restarts = min(branches, key=lambda t: t[0])
        betas = np.array([cands[i] for i in costs.argmin(axis=1)])
        w, tr2, conv, it2 = _descend(xw, w_start, betas, opts)
        trace = list(trace) + list(tr2)
        it += it2
        # one more selection pass on the refined estimate
        y = _demix(w, xw)
        new = np.array([cands[int(np.argmin([source_cost(y[:, i, :], c) for c in cands]))] for i in range(n)])
        if np.any(new != betas):
            betas = new
            w, tr3, conv, it3 = _descend(xw, w, betas, opts)
            trace += list(tr3)
            it += it3

    w_full = np.einsum("kij,kjl->kil", w, q)
    w_full = normalize_demixing(w_full, xa, getattr(x, "mixing", None))
    return FitResult(DemixingEnsemble(w_full), [float(t) for t in trace],
                     tuple(float(b) for b in betas), bool(conv), int(it), restarts)


# --------------------------------------------------------------------------
# JDIAG-SOS


def lagged_cross_covariances(z: np.ndarray, n_lags: int) -> np.ndarray:
    """Symmetrized lagged cross-covariances between whitened datasets.

    Returns ``c[l, k1, k2]`` (N x N) averaging the estimates at lags ``+l``
    and ``-l``, so ``c[l, k2, k1] = c[l, k1, k2]^T``.
    """
    k, n, v = z.shape
    out = np.empty((n_lags, k, k, n, n))
    for lag in range(n_lags):
        a = z[:, :, lag:]
        b = z[:, :, :v - lag]
        fwd = np.einsum("ain,bjn->abij", a, b) / (v - lag)
        bwd = np.einsum("ain,bjn->abij", b, a) / (v - lag)
        out[lag] = 0.5 * (fwd + bwd)
    return out


def _offdiag_energy(u, c):
    m = np.einsum("aij,labjk,bmk->labim", u, c, u)
    diag = np.einsum("labii->labi", m)
    return float(np.sum(m**2) - np.sum(diag**2))


_GRID = np.linspace(-np.pi, np.pi, 721)[:-1]


def _best_angle(w, g):
    """Maximize ``w . x + x^T G x`` over ``x = (cos p, sin p)``; returns p."""
    c, s = np.cos(_GRID), np.sin(_GRID)
    f = w[0] * c + w[1] * s + g[0, 0] * c * c + 2 * g[0, 1] * c * s + g[1, 1] * s * s
    p = _GRID[np.argmax(f)]
    for _ in range(5):
        c, s = np.cos(p), np.sin(p)
        d1 = -w[0] * s + w[1] * c + (g[1, 1] - g[0, 0]) * 2 * s * c + 2 * g[0, 1] * (c * c - s * s)
        d2 = -w[0] * c - w[1] * s + (g[1, 1] - g[0, 0]) * 2 * (c * c - s * s) - 8 * g[0, 1] * s * c
        if d2 < 0:
            p -= d1 / d2
    return p


def fit_jdiag_sos(x: DatasetEnsemble, n_lags: int, opts: FitOptions = FitOptions(),
                  max_sweeps: int = 200, rel_tol: float = 1e-10) -> FitResult:
    """Orthogonal joint diagonalization of lagged cross-covariances.

    Each Jacobi step rotates coordinates ``(i, j)`` of dataset ``k`` by the
    angle that maximizes the retained diagonal energy of every matrix that
    involves dataset ``k``; for fixed other datasets this is a
    trigonometric polynomial of degree two in twice the angle.
    """
    xa = x.observations if isinstance(x, DatasetEnsemble) else np.asarray(x, dtype=float)
    k, n, v = xa.shape
    if n_lags < 1:
        raise ValueError("n_lags must be >= 1")
    if v <= n_lags * n:
        raise ValueError("need V > n_lags * N")
    q = _whitening(xa)
    z = _demix(q, xa)
    c = lagged_cross_covariances(z, n_lags)
    u = np.tile(np.eye(n), (k, 1, 1))
    prev = _offdiag_energy(u, c)
    trace = [prev]
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        for kk in range(k):
            for i in range(n):
                for j in range(i + 1, n):
                    w = np.zeros(2)
                    g = np.zeros((2, 2))
                    for lag in range(n_lags):
                        for k2 in range(k):
                            m = u[kk] @ c[lag, kk, k2] @ u[k2].T
                            if k2 == kk:
                                h, b = 0.5 * (m[i, i] - m[j, j]), m[i, j]
                                g += 2 * np.outer([h, b], [h, b])
                            else:
                                p_ = m[i, i] ** 2 + m[j, j] ** 2
                                q_ = m[i, j] ** 2 + m[j, i] ** 2
                                r_ = m[i, i] * m[j, i] - m[j, j] * m[i, j]
                                w += 2 * np.array([0.5 * (p_ - q_), r_])
                    theta = 0.5 * _best_angle(w, g)
                    cs, sn = np.cos(theta), np.sin(theta)
                    rot = np.eye(n)
                    rot[i, i], rot[i, j], rot[j, i], rot[j, j] = cs, sn, -sn, cs
                    u[kk] = rot @ u[kk]
        cur = _offdiag_energy(u, c)
        trace.append(cur)
        if prev - cur < rel_tol * prev:
            converged = True
            break
        prev = cur
    w_full = np.einsum("kij,kjl->kil", u, q)
    w_norm = normalize_demixing(w_full, xa, getattr(x, "mixing", None))
    # normalization only flips signs here (rows already have unit variance)
    flips = np.sign(np.einsum("kij,kij->ki", w_norm, w_full))
    u = u * flips[:, :, None]
    return FitResult(DemixingEnsemble(w_norm), trace, None, converged, sweep, 0,
                     extras={"rotations": u, "whitening": q})
