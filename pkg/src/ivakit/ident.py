"""Identifiability audits on source-model descriptions.

Two sources ``m != n`` cannot be told apart when, on some nonempty index set
``alpha`` of datasets, both have Gaussian components independent of the
rest and their covariances on ``alpha`` are related by
``R_m = D R_n D`` (sample block by sample block) for a full-rank diagonal
``D``.  For Gaussian families independence is equivalent to zero
covariance, so the candidate index sets are the unions of connected
components of the covariance coupling graph.  MPE sources with
``beta != 1`` have no Gaussian component and no independent split.
"""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Family, SourceModel, check_spd

ZERO_TOL = 1e-10
MAX_DENSE = 4096


def _common_diag(blocks_m: np.ndarray, blocks_n: np.ndarray, tol: float) -> Optional[np.ndarray]:
    """Diagonal ``d`` with ``blocks_m[b] = diag(d) blocks_n[b] diag(d)`` for all b, or None.

    Magnitudes come from the diagonal of the first block, signs from a
    breadth-first walk over the nonzero off-diagonal entries of all
    blocks; the full relation is verified at the end.
    """
    bm = np.asarray(blocks_m, dtype=float)
    bn = np.asarray(blocks_n, dtype=float)
    if bm.shape != bn.shape:
        raise ValueError("dimension mismatch")
    d = bm.shape[-1]
    dn = np.diag(bn[0])
    if np.any(dn == 0):
        raise ValueError("zero diagonal entry in r_n")
    ratio = np.diag(bm[0]) / dn
    if np.any(ratio <= 0):
        return None
    mag = np.sqrt(ratio)
    scale = max(np.abs(bn).max(), np.abs(bm).max(), 1e-300)
    # for every (i, j) read the sign of d_i d_j off the block where R_n is largest
    both = np.concatenate([bn, bn.transpose(0, 2, 1)])
    both_m = np.concatenate([bm, bm.transpose(0, 2, 1)])
    best = np.abs(both).argmax(axis=0)
    ref_n = np.take_along_axis(both, best[None], axis=0)[0]
    ref_m = np.take_along_axis(both_m, best[None], axis=0)[0]
    edges = np.abs(ref_n) > tol * scale
    positive = ref_m * ref_n > 0
    sign = np.zeros(d)
    for root in range(d):
        if sign[root]:
            continue
        sign[root] = 1.0
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j in np.nonzero(edges[i])[0]:
                if j != i and not sign[j]:
                    sign[j] = sign[i] if positive[i, j] else -sign[i]
                    queue.append(j)
    dvec = mag * sign
    recon = dvec[:, None] * bn * dvec[None, :]
    if np.abs(recon - bm).max() > tol * max(np.abs(bm).max(), 1.0):
        return None
    return dvec


def diag_similar(r_m, r_n, tol: float = 1e-8) -> Optional[np.ndarray]:
    """Diagonal ``D`` with ``R_m = D R_n D``, or ``None`` if none exists.

    The first entry of each sign-connected group of D is positive, so
    ``R_m = 4 R_n`` gives ``D = 2 I``.

    Raises
    ------
    ValueError
        On a dimension mismatch or a zero on the diagonal of ``r_n``.
    """
    rm = np.atleast_2d(np.asarray(r_m, dtype=float))
    rn = np.atleast_2d(np.asarray(r_n, dtype=float))
    if rm.shape != rn.shape or rm.shape[0] != rm.shape[1]:
        raise ValueError("r_m and r_n must be square with the same size")
    dvec = _common_diag(rm[None], rn[None], tol)
    return None if dvec is None else np.diag(dvec)


# --------------------------------------------------------------------------
# model structure


def _components(adjacency: np.ndarray) -> List[Tuple[int, ...]]:
    k = adjacency.shape[0]
    seen = [False] * k
    comps = []
    for root in range(k):
        if seen[root]:
            continue
        seen[root] = True
        comp, queue = [root], deque([root])
        while queue:
            i = queue.popleft()
            for j in np.nonzero(adjacency[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    comp.append(int(j))
                    queue.append(j)
        comps.append(tuple(sorted(comp)))
    return sorted(comps)


def _is_gaussian(model: SourceModel) -> bool:
    if model.family not in (Family.GAUSSIAN, Family.MPE, Family.VECTOR_MA):
        raise ValueError("undecidable family")
    return model.is_gaussian


def model_blocks(model: SourceModel, v_samples: Optional[int] = None) -> np.ndarray:
    """Covariance blocks ``E[s(v1) s(v2)^T]`` describing the model, as ``(B, K, K)``.

    Stationary models list lags ``0..L-1`` (capped at ``V-1``); models with
    an explicit sample covariance list every ``(v1, v2)`` block.
    """
    k = model.k_datasets
    if model.family is Family.VECTOR_MA:
        n_lags = len(model.ma_taps)
        if v_samples is not None:
            n_lags = min(n_lags, v_samples)
        return np.stack([model.lag_covariance(h) for h in range(n_lags)])
    if model.sample_covariance is not None:
        if k * (v_samples or 0) > MAX_DENSE:
            raise ValueError(f"K*V exceeds the dense limit {MAX_DENSE}")
        full = model.sample_covariance
        v = full.shape[0] // k
        return full.reshape(v, k, v, k).transpose(0, 2, 1, 3).reshape(v * v, k, k)
    return model.covariance()[None]


def _coupling(blocks: np.ndarray) -> np.ndarray:
    scale = max(np.abs(blocks).max(), 1e-300)
    adj = (np.abs(blocks) > ZERO_TOL * scale).any(axis=0)
    return adj | adj.T


def gaussian_subsets(model: SourceModel, v_samples: Optional[int] = None, proper: bool = False):
    """Index sets ``alpha`` on which the model has an independent Gaussian component.

    These are the unions of connected components of the coupling graph
    (all of them when the model is wholly Gaussian, none otherwise).
    With ``proper=True`` the full index set is left out.
    """
    if not _is_gaussian(model):
        return []
    comps = _components(_coupling(model_blocks(model, v_samples)))
    out = []
    for r in range(1, len(comps) + 1):
        for combo in itertools.combinations(comps, r):
            alpha = tuple(sorted(itertools.chain.from_iterable(combo)))
            if proper and len(alpha) == model.k_datasets:
                continue
            out.append(alpha)
    return sorted(out, key=lambda a: (len(a), a))


def independent_splits(model: SourceModel, v_samples: Optional[int] = None):
    """Proper nonempty ``alpha`` such that ``s_alpha`` is independent of the rest.

    Only Gaussian models can split; a non-Gaussian MPE vector is
    dependent across coordinates even with a block-diagonal dispersion.
    """
    return gaussian_subsets(model, v_samples, proper=True)


# --------------------------------------------------------------------------
# verdicts


@dataclass(frozen=True)
class Violation:
    pair: Tuple[int, int]
    alpha: Tuple[int, ...]
    witness: np.ndarray
    regime: str

    def to_dict(self):
        return {"pair": list(self.pair), "alpha": list(self.alpha),
                "witness_diag": [float(x) for x in self.witness], "regime": self.regime}


@dataclass(frozen=True)
class IdentVerdict:
    identifiable: bool
    violations: list = field(default_factory=list)
    common_permutation: bool = True
    permutation_violations: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "identifiable": self.identifiable,
            "violations": [v.to_dict() for v in self.violations],
            "common_permutation": self.common_permutation,
            "permutation_violations": [{"pair": list(p), "alpha": list(a)}
                                       for p, a in self.permutation_violations],
        }, indent=2)


def _check(models: Sequence[SourceModel], v_samples: Optional[int], regime: str, tol: float) -> IdentVerdict:
    k = models[0].k_datasets
    if any(m.k_datasets != k for m in models):
        raise ValueError("models disagree on K")
    blocks = [model_blocks(m, v_samples) if _is_gaussian(m) else None for m in models]
    subsets = [gaussian_subsets(m, v_samples) for m in models]
    violations = []
    for a, b in itertools.combinations(range(len(models)), 2):
        common = sorted(set(subsets[a]) & set(subsets[b]), key=lambda s: (len(s), s))
        for alpha in common:
            ba, bb = blocks[a], blocks[b]
            nb = max(len(ba), len(bb))
            # zero-pad the shorter lag list: a stationary model with fewer lags has zero covariance there
            pa = np.zeros((nb, k, k))
            pb = np.zeros((nb, k, k))
            pa[:len(ba)] = ba
            pb[:len(bb)] = bb
            idx = np.ix_(range(nb), alpha, alpha)
            dvec = _common_diag(pa[idx], pb[idx], tol)
            if dvec is not None:
                violations.append(Violation((a, b), alpha, dvec, regime))
    # a violating alpha implies violations on its sub-blocks; report the maximal ones
    violations = [v for v in violations
                  if not any(w.pair == v.pair and set(v.alpha) < set(w.alpha) for w in violations)]
    ok_perm, perm_viol = check_common_permutation(models, v_samples)
    return IdentVerdict(not violations, violations, ok_perm, perm_viol)


def check_iva_identifiability_iid(models: Sequence[SourceModel], tol: float = 1e-8) -> IdentVerdict:
    """Identifiability of sources with i.i.d. samples.

    Raises
    ------
    ValueError
        If a model has sample-to-sample dependence (use
        :func:`check_iva_identifiability_general`).
    """
    for m in models:
        if not m.iid:
            raise ValueError("model has sample dependence; use check_iva_identifiability_general")
    return _check(models, None, "iid", tol)


def check_iva_identifiability_general(models: Sequence[SourceModel], v_samples: int,
                                      tol: float = 1e-8) -> IdentVerdict:
    """Identifiability with sample-to-sample dependence.

    The relation ``R_{m,alpha} = (I_V ⊗ D) R_{n,alpha} (I_V ⊗ D)`` is tested
    block by block with one common D.  Models with an explicit
    ``K V x K V`` covariance are limited to ``K V <= 4096``.
    """
    for m in models:
        if m.sample_covariance is not None and m.sample_covariance.shape[0] != m.k_datasets * v_samples:
            raise ValueError("sample_covariance was built for a different V")
    if any(m.sample_covariance is not None for m in models):
        # every model needs the same block layout, so expand stationary ones
        k = models[0].k_datasets
        if k * v_samples > MAX_DENSE:
            raise ValueError(f"K*V = {k * v_samples} exceeds the dense limit {MAX_DENSE}")
        models = [m if m.sample_covariance is not None else _dense_copy(m, v_samples) for m in models]
    return _check(models, v_samples, "general", tol)


def _dense_copy(model: SourceModel, v_samples: int) -> SourceModel:
    if not model.is_gaussian:
        # non-Gaussian models never enter the diagonal-similarity test
        return model
    full = model.full_covariance(v_samples)
    return SourceModel.gaussian(model.covariance(), sample_covariance=full)


def check_common_permutation(models: Sequence[SourceModel], v_samples: Optional[int] = None):
    """Whether the permutation ambiguity is shared by all datasets.

    Returns ``(True, [])`` unless some pair of sources is independent across
    the same proper split ``alpha`` of the datasets, in which case the
    offending ``(pair, alpha)`` entries are returned.
    """
    splits = [set(independent_splits(m, v_samples)) for m in models]
    violations = []
    for a, b in itertools.combinations(range(len(models)), 2):
        shared = splits[a] & splits[b]
        k = models[a].k_datasets
        for alpha in sorted(shared, key=lambda s: (len(s), s)):
            rest = tuple(i for i in range(k) if i not in alpha)
            # alpha and its complement describe the same split; keep the smaller side
            if (len(rest), rest) < (len(alpha), alpha) and rest in shared:
                continue
            violations.append(((a, b), alpha))
    return not violations, violations


@dataclass(frozen=True)
class SingularityReport:
    min_eigenvalues: dict
    singular: dict
    verdict: IdentVerdict
    agrees: bool


def verify_fim_singularity(models: Sequence[SourceModel], v_samples: int) -> SingularityReport:
    """Compare the symbolic verdict with numeric singularity of each ``F_{m,n}``."""
    from .fim import fim_for_models

    fim = fim_for_models(models, v_samples)
    eig = fim.min_eigenvalues()
    if all(m.iid for m in models):
        verdict = check_iva_identifiability_iid(models)
    else:
        verdict = check_iva_identifiability_general(models, v_samples)
    flagged = {v.pair for v in verdict.violations}
    singular = {pair: e[2] for pair, e in eig.items()}
    agrees = all(singular[p] == (p in flagged) for p in singular)
    return SingularityReport({p: e[0] / e[1] for p, e in eig.items()}, singular, verdict, agrees)
