"""Fisher information for the demixing parameters.

At the true solution the FIM of the stacked demixing entries ``w^[k]_{m,n}``
is block diagonal after a permutation: one K x K block ``F_n`` per source
(scale parameters ``w_{n,n}``) and one 2K x 2K block ``F_{m,n}`` per
unordered source pair.  Everything is expressed through the K x K
matrices

    Kmat_{m,n}[k1, k2] = (1/V) E[(phi_m^[k1])^T s_n^[k1] (s_n^[k2])^T phi_m^[k2]].

Full covariances over samples use the sample-major ordering ``v*K + k``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from .core import Family, SourceModel, as_generator, direct_sum
from .score import kappa_elliptical, model_score, radial_moment

SINGULAR_RTOL = 1e-9
MAX_DENSE = 4096


@dataclass(frozen=True)
class KMatrix:
    values: np.ndarray
    source_pair: Tuple[int, int]

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("KMatrix values must be square")
        if not np.all(np.isfinite(v)):
            raise ValueError("KMatrix has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "source_pair", tuple(int(i) for i in self.source_pair))


@dataclass(frozen=True)
class FimBlocks:
    """Nonzero diagonal blocks of the permuted FIM.

    ``diag_blocks[n]`` is ``F_n``; ``pair_blocks[(m, n)]`` (``m < n``) is
    ``F_{m,n}`` acting on ``(w_{m,n}^[1..K], w_{n,m}^[1..K])``.
    """

    diag_blocks: tuple
    pair_blocks: Dict[Tuple[int, int], np.ndarray]
    v_samples: int
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_sources(self) -> int:
        return len(self.diag_blocks)

    def pair(self, m: int, n: int) -> np.ndarray:
        if m < n:
            return self.pair_blocks[(m, n)]
        # swap the roles of the two halves
        f = self.pair_blocks[(n, m)]
        k = f.shape[0] // 2
        perm = np.r_[k:2 * k, 0:k]
        return f[np.ix_(perm, perm)]

    def dense(self) -> np.ndarray:
        """Full permuted FIM: scale blocks first, then pair blocks in (m, n) order."""
        keys = sorted(self.pair_blocks)
        return direct_sum(list(self.diag_blocks) + [self.pair_blocks[key] for key in keys])

    def min_eigenvalues(self) -> Dict[Tuple[int, int], tuple]:
        """Per pair: ``(min eigenvalue, max eigenvalue, singular?)``."""
        out = {}
        for key, f in sorted(self.pair_blocks.items()):
            e = np.linalg.eigvalsh(0.5 * (f + f.T))
            out[key] = (float(e[0]), float(e[-1]), bool(e[0] < SINGULAR_RTOL * e[-1]))
        return out


# --------------------------------------------------------------------------
# K matrices


def k_matrix_iid(gamma, r, source_pair=(0, 1)) -> KMatrix:
    """``Gamma_m ∘ R_n`` for sources with i.i.d. samples."""
    gamma = np.asarray(gamma, dtype=float)
    r = np.asarray(r, dtype=float)
    if gamma.shape != r.shape or gamma.ndim != 2:
        raise ValueError(f"shape mismatch: {gamma.shape} vs {r.shape}")
    return KMatrix(gamma * r, source_pair)


def k_matrix_from_stats(gamma_blocks, r_blocks, v_samples: int, source_pair=(0, 1)) -> KMatrix:
    """K matrix from per-dataset-pair V x V statistics.

    Parameters
    ----------
    gamma_blocks : array_like, shape (K, K, V, V)
        ``gamma_blocks[k1, k2]`` is ``Gamma_m^[k1,k2] = E[phi_m^[k1] (phi_m^[k2])^T]``.
    r_blocks : array_like, shape (K, K, V, V)
        ``r_blocks[k1, k2]`` is ``R_n^[k1,k2] = E[s_n^[k1] (s_n^[k2])^T]``.
    v_samples : int

    Returns
    -------
    KMatrix
        Entry ``(k1, k2)`` is ``trace(Gamma^[k2,k1] R^[k1,k2]) / V``.
    """
    g = np.asarray(gamma_blocks, dtype=float)
    r = np.asarray(r_blocks, dtype=float)
    if g.ndim != 4 or g.shape != r.shape or g.shape[0] != g.shape[1] or g.shape[2:] != (v_samples, v_samples):
        raise ValueError("gamma/r blocks must both have shape (K, K, V, V)")
    # trace(G^[k2,k1] R^[k1,k2]) = sum_ij G^[k2,k1]_ij R^[k1,k2]_ji
    vals = np.einsum("baij,abji->ab", g, r) / v_samples
    return KMatrix(vals, source_pair)


def blocks_from_full(full, k_datasets: int) -> np.ndarray:
    """Split a sample-major ``KV x KV`` matrix into ``(K, K, V, V)`` dataset-pair blocks."""
    full = np.asarray(full, dtype=float)
    v = full.shape[0] // k_datasets
    return full.reshape(v, k_datasets, v, k_datasets).transpose(1, 3, 0, 2)


def k_matrix_from_full(gamma_full, r_full, k_datasets: int, source_pair=(0, 1)) -> KMatrix:
    """K matrix from full sample-major ``Gamma_m`` and ``R_n`` (both KV x KV)."""
    g = np.asarray(gamma_full, dtype=float)
    r = np.asarray(r_full, dtype=float)
    if g.shape != r.shape:
        raise ValueError("shape mismatch")
    v = g.shape[0] // k_datasets
    # sum over sample indices of (Gamma ∘ R)[(v1,k2),(v2,k1)] gives entry (k1, k2)
    p = (g * r.T).reshape(v, k_datasets, v, k_datasets).sum(axis=(0, 2))
    return KMatrix(p.T / v, source_pair)


def self_k_matrix_gaussian_full(gamma_full, r_full, k_datasets: int, n: int = 0) -> KMatrix:
    """``Kmat_{n,n}`` for a Gaussian source with full covariance ``R`` and ``Gamma = R^{-1}``.

    From Isserlis' theorem, ``Kmat_{n,n} = V 1 + (1/V) blocksum(Gamma ∘ R) + I``.
    """
    g = np.asarray(gamma_full, dtype=float)
    r = np.asarray(r_full, dtype=float)
    v = g.shape[0] // k_datasets
    bs = (g * r).reshape(v, k_datasets, v, k_datasets).sum(axis=(0, 2))
    vals = v * np.ones((k_datasets, k_datasets)) + bs / v + np.eye(k_datasets)
    return KMatrix(vals, (n, n))


def self_k_matrix_iid(moment, v_samples: int, n: int = 0) -> KMatrix:
    """``Kmat_{n,n} = M + (V-1) 1`` from ``M = E[(phi ∘ s)(phi ∘ s)^T]``."""
    m = np.asarray(moment, dtype=float)
    return KMatrix(m + (v_samples - 1) * np.ones_like(m), (n, n))


def hadamard_moment(model: SourceModel) -> np.ndarray:
    """``E[(phi ∘ s)(phi ∘ s)^T]`` for one i.i.d. sample of an elliptical source.

    For a spherical direction the fourth moments give
    ``c * (1 + Sigma^{-1} ∘ Sigma + I)`` with
    ``c = beta^2 E[r^(4 beta)] / (K (K + 2))`` (``c = 1`` for Gaussians).
    """
    k = model.k_datasets
    if model.family is Family.MPE:
        s = np.asarray(model.dispersion)
        beta = model.shape_beta
        c = beta**2 * radial_moment(beta, k, 4 * beta)[0] / (k * (k + 2))
    else:
        s = model.covariance()
        c = 1.0
    return c * (np.ones((k, k)) + np.linalg.inv(s) * s + np.eye(k))


def score_covariance(model: SourceModel) -> np.ndarray:
    """Per-sample ``Gamma = E[phi phi^T]`` of an i.i.d. model (``kappa R^{-1}``)."""
    r = model.covariance()
    if model.family is Family.MPE:
        return kappa_elliptical(model.shape_beta, model.k_datasets).kappa * np.linalg.inv(r)
    return np.linalg.inv(r)


def full_score_covariance(model: SourceModel, v_samples: int) -> np.ndarray:
    """Sample-major ``KV x KV`` score covariance of a whole SCM."""
    if model.iid:
        return np.kron(np.eye(v_samples), score_covariance(model))
    if model.family is Family.MPE:
        raise ValueError("sample-dependent MPE models are not supported")
    return np.linalg.inv(model.full_covariance(v_samples))


def k_matrices_for_models(models: Sequence[SourceModel], v_samples: int) -> Dict[Tuple[int, int], KMatrix]:
    """All ``Kmat_{m,n}`` (including ``m == n``) for a list of source models.

    Uses the Hadamard forms when every model has i.i.d. samples and the
    full sample-major covariances otherwise (dense, so ``K V`` is capped
    at 4096).
    """
    n_src = len(models)
    k = models[0].k_datasets
    if any(m.k_datasets != k for m in models):
        raise ValueError("models disagree on K")
    out = {}
    if all(m.iid for m in models):
        gam = [score_covariance(m) for m in models]
        cov = [m.covariance() for m in models]
        for a in range(n_src):
            out[(a, a)] = self_k_matrix_iid(hadamard_moment(models[a]), v_samples, a)
            for b in range(n_src):
                if a != b:
                    out[(a, b)] = k_matrix_iid(gam[a], cov[b], (a, b))
        return out
    if k * v_samples > MAX_DENSE:
        raise ValueError(f"K*V = {k * v_samples} exceeds the dense limit {MAX_DENSE}")
    gam = [full_score_covariance(m, v_samples) for m in models]
    cov = [np.kron(np.eye(v_samples), m.covariance()) if m.iid else m.full_covariance(v_samples)
           for m in models]
    for a in range(n_src):
        if models[a].family is Family.MPE:
            out[(a, a)] = self_k_matrix_iid(hadamard_moment(models[a]), v_samples, a)
        else:
            out[(a, a)] = self_k_matrix_gaussian_full(gam[a], cov[a], k, a)
        for b in range(n_src):
            if a != b:
                out[(a, b)] = k_matrix_from_full(gam[a], cov[b], k, (a, b))
    return out


# --------------------------------------------------------------------------
# assembly


def assemble_fim(k_matrices, v_samples: int, n_sources: int, k_datasets: int) -> FimBlocks:
    """Build ``F_n = V (Kmat_{n,n} - V 1)`` and ``F_{m,n} = V [[Kmat_mn, I], [I, Kmat_nm]]``."""
    def get(m, n):
        try:
            km = k_matrices[(m, n)]
        except KeyError:
            raise ValueError(f"missing K matrix for pair {(m, n)}") from None
        vals = km.values if isinstance(km, KMatrix) else np.asarray(km, dtype=float)
        if vals.shape != (k_datasets, k_datasets):
            raise ValueError(f"K matrix {(m, n)} has shape {vals.shape}")
        return vals

    v = v_samples
    eye = np.eye(k_datasets)
    diag = tuple(v * (get(n, n) - v * np.ones((k_datasets, k_datasets))) for n in range(n_sources))
    pairs = {}
    for m in range(n_sources):
        for n in range(m + 1, n_sources):
            f = v * np.block([[get(m, n), eye], [eye, get(n, m)]])
            # the identity blocks are exact by construction
            f[:k_datasets, k_datasets:] = v * eye
            f[k_datasets:, :k_datasets] = v * eye
            pairs[(m, n)] = f
    return FimBlocks(diag_blocks=diag, pair_blocks=pairs, v_samples=v)


def fim_for_models(models: Sequence[SourceModel], v_samples: int) -> FimBlocks:
    km = k_matrices_for_models(models, v_samples)
    return assemble_fim(km, v_samples, len(models), models[0].k_datasets)


def _draw_batch(model: SourceModel, v_samples: int, n_trials: int, gen):
    """``n_trials`` independent SCMs as ``(M, K, V)`` together with their scores."""
    from .sources import sample_scv

    k = model.k_datasets
    if model.iid:
        if model.family is Family.VECTOR_MA:
            cols = np.linalg.cholesky(model.covariance()) @ gen.standard_normal((k, n_trials * v_samples))
        else:
            cols = sample_scv(model, n_trials * v_samples, gen).data
        phi = model_score(model, cols).phi
        s = cols.reshape(k, n_trials, v_samples).transpose(1, 0, 2)
        p = phi.reshape(k, n_trials, v_samples).transpose(1, 0, 2)
        return s, p
    full = model.full_covariance(v_samples)
    chol = np.linalg.cholesky(full)
    z = gen.standard_normal((full.shape[0], n_trials))
    vec = chol @ z
    # Gamma_full vec = R^{-1} vec = L^{-T} z
    phi = np.linalg.solve(chol.T, z)
    s = vec.T.reshape(n_trials, v_samples, k).transpose(0, 2, 1)
    p = phi.T.reshape(n_trials, v_samples, k).transpose(0, 2, 1)
    return s, p


@dataclass(frozen=True)
class EmpiricalFim:
    blocks: FimBlocks
    mean_gradient: np.ndarray
    gradient_stderr: np.ndarray
    n_trials: int


def empirical_fim(models: Sequence[SourceModel], v_samples: int, n_trials: int, rng,
                  chunk: int = 20_000) -> EmpiricalFim:
    """Monte-Carlo FIM from the likelihood gradient at ``W = A = I``.

    Each trial draws fresh sources, evaluates
    ``dL/dw^[k]_{m,n} = -(phi_m^[k])^T s_n^[k] + V delta_{mn}`` and the
    sample covariance of the stacked gradients is returned in the same
    block layout as :func:`assemble_fim`.

    Raises
    ------
    ValueError
        ``"model mismatch"`` when the mean gradient is more than 5 standard
        errors from zero for some entry, which means the scores do not
        belong to the sampled distribution.
    """
    gen = as_generator(rng)
    n_src = len(models)
    k = models[0].k_datasets
    v = v_samples
    dim = k * n_src * n_src
    s1 = np.zeros(dim)
    s2 = np.zeros((dim, dim))
    done = 0
    while done < n_trials:
        m = min(chunk, n_trials - done)
        draws = [_draw_batch(model, v, m, gen) for model in models]
        s = np.stack([d[0] for d in draws], axis=2)    # (M, K, N, V)
        phi = np.stack([d[1] for d in draws], axis=2)
        g = -np.einsum("tkmv,tknv->tkmn", phi, s) + v * np.eye(n_src)
        g = g.reshape(m, dim)
        s1 += g.sum(axis=0)
        s2 += g.T @ g
        done += m
    mean = s1 / n_trials
    cov = (s2 - n_trials * np.outer(mean, mean)) / (n_trials - 1)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0) / n_trials)
    z = np.abs(mean) / np.where(se > 0, se, np.inf)
    if np.any(z > 5):
        raise ValueError("model mismatch")
    c = cov.reshape(k, n_src, n_src, k, n_src, n_src)
    diag = tuple(c[:, n, n, :, n, n] for n in range(n_src))
    pairs = {}
    for a in range(n_src):
        for b in range(a + 1, n_src):
            pairs[(a, b)] = np.block([[c[:, a, b, :, a, b], c[:, a, b, :, b, a]],
                                      [c[:, b, a, :, a, b], c[:, b, a, :, b, a]]])
    blocks = FimBlocks(diag_blocks=diag, pair_blocks=pairs, v_samples=v)
    return EmpiricalFim(blocks=blocks, mean_gradient=mean.reshape(k, n_src, n_src),
                        gradient_stderr=se.reshape(k, n_src, n_src), n_trials=int(n_trials))


def export_fim_csv(blocks: FimBlocks, path) -> None:
    """Write every block entry as ``block,row,col,value`` rows for offline inspection."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "row", "col", "value"])
        for n, f in enumerate(blocks.diag_blocks):
            for (i, j), x in np.ndenumerate(f):
                w.writerow([f"F_{n}", i, j, repr(float(x))])
        for (a, b), f in sorted(blocks.pair_blocks.items()):
            for (i, j), x in np.ndenumerate(f):
                w.writerow([f"F_{a}_{b}", i, j, repr(float(x))])
