"""Cramér-Rao type lower bounds on the interference-to-signal ratio (ISR).

For a source pair ``(m, n)`` the bound on the ISR summed over datasets is

    (1/V) trace((Kmat_mn - Kmat_nm^{-1})^{-1} ∘ C_n ⊘ C_m),

with ``C_n = E[S_n S_n^T]`` (only its diagonal, the per-dataset energy,
matters).  The special cases below are the same expression with particular
K matrices plugged in; each is implemented on its own code path so that the
paths can be checked against one another.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .core import Family, SourceModel, check_spd, hadamard_quotient_trace
from .fim import KMatrix, k_matrices_for_models
from .score import kappa_elliptical

MAX_CONDITION = 1e12


class Regime(str, enum.Enum):
    GENERAL = "general"
    IID = "iid"
    ELLIPTICAL = "elliptical"
    ICA_IID = "ica_iid"
    ICA_GAUSS = "ica_gauss"


@dataclass(frozen=True)
class PairBound:
    """Bound for one ordered pair; ``per_dataset[k]`` sums to ``value`` when finite."""

    value: float
    per_dataset: np.ndarray
    finite: bool
    diagnosis: str = ""


def _vals(k):
    return k.values if isinstance(k, KMatrix) else np.atleast_2d(np.asarray(k, dtype=float))


def _singular(mat, scale: float = 0.0) -> Optional[str]:
    """Diagnosis string when ``mat`` is too ill-conditioned to invert, else None.

    ``scale`` is the norm of the operands ``mat`` was computed from.  A
    difference of nearly equal matrices is rounding noise whose own
    condition number can look harmless, so it is judged against ``scale``.
    """
    s = np.linalg.svd(mat, compute_uv=False)
    top = max(s[0], scale)
    if top == 0 or s[-1] <= 1e-14 * top:
        return "nonidentifiable"
    if top / s[-1] > MAX_CONDITION:
        return "near-nonidentifiable"
    return None


def _infinite(k: int, diagnosis: str) -> PairBound:
    return PairBound(np.inf, np.full(k, np.inf), False, diagnosis)


def isr_bound_general(k_mn, k_nm, c_m, c_n, v_samples: int) -> PairBound:
    """Bound for pair ``(m, n)`` from arbitrary K matrices.

    Parameters
    ----------
    k_mn, k_nm : KMatrix or array_like
        ``Kmat_{m,n}`` and ``Kmat_{n,m}``.
    c_m, c_n : array_like
        ``E[S S^T]`` per sample for the two sources (K x K; only the
        diagonal is used).
    v_samples : int

    Returns
    -------
    PairBound
        ``value = +inf`` with ``finite=False`` when the bracketed matrix is
        singular or its condition number exceeds 1e12.
    """
    a, b = _vals(k_mn), _vals(k_nm)
    k = a.shape[0]
    if b.shape != a.shape:
        raise ValueError("K matrices differ in shape")
    em = np.diag(np.atleast_2d(np.asarray(c_m, dtype=float)))
    en = np.diag(np.atleast_2d(np.asarray(c_n, dtype=float)))
    if np.any(em == 0):
        raise ValueError("zero source energy")
    diag = _singular(b)
    if diag:
        return _infinite(k, diag)
    b_inv = np.linalg.inv(b)
    bracket = a - b_inv
    diag = _singular(bracket, max(np.linalg.norm(a, 2), np.linalg.norm(b_inv, 2)))
    if diag:
        return _infinite(k, diag)
    inv = np.linalg.inv(bracket)
    per_k = np.diag(inv) * en / em / v_samples
    return PairBound(float(per_k.sum()), per_k, True)


def isr_bound_elliptical(kappa_m, kappa_n, r_m, r_n, v_samples: int) -> PairBound:
    """Closed form for i.i.d. elliptical sources, where ``Gamma = kappa R^{-1}``."""
    r_m = check_spd(r_m, "r_m")
    r_n = check_spd(r_n, "r_n")
    if kappa_m < 1 - 1e-8 or kappa_n < 1 - 1e-8:
        raise ValueError("kappa must be >= 1")
    k = r_m.shape[0]
    k_mn = kappa_m * np.linalg.inv(r_m) * r_n
    k_nm = kappa_n * np.linalg.inv(r_n) * r_m
    k_nm_inv = np.linalg.inv(k_nm)
    bracket = k_mn - k_nm_inv
    if _singular(bracket, max(np.linalg.norm(k_mn, 2), np.linalg.norm(k_nm_inv, 2))):
        return _infinite(k, "Gaussian/proportional-covariance pair")
    inv = np.linalg.inv(bracket)
    ones = np.ones((k, k))
    en = np.diag(r_n)[:, None] * ones
    em = np.diag(r_m)[:, None] * ones
    value = hadamard_quotient_trace(inv, en, em) / v_samples
    per_k = np.diag(inv) * np.diag(r_n) / np.diag(r_m) / v_samples
    return PairBound(float(value), per_k, True)


def isr_bound_ica_iid(kappa_m: float, kappa_n: float, v_samples: int) -> PairBound:
    """``(1/V) kappa_n / (kappa_m kappa_n - 1)`` for one dataset with unit-variance i.i.d. samples."""
    if kappa_m < 1 - 1e-8 or kappa_n < 1 - 1e-8:
        raise ValueError("kappa must be >= 1")
    den = kappa_m * kappa_n - 1.0
    if den <= 1e-12 * kappa_m * kappa_n:
        return _infinite(1, "two Gaussian sources")
    value = kappa_n / den / v_samples
    return PairBound(float(value), np.array([value]), True)


def isr_bound_ica_gauss(r_m, r_n, v_samples: Optional[int] = None, energy_ratio: bool = True) -> PairBound:
    """Bound for one dataset of Gaussian sources with sample covariances ``R_m, R_n`` (V x V).

    Uses ``Kmat_{m,n} = trace(R_m^{-1} R_n) / V``.  With ``energy_ratio``
    the result is multiplied by ``trace(R_n) / trace(R_m)``, the ratio of
    per-sample energies; ``energy_ratio=False`` gives the equal-energy
    expression ``(1/V) / (Kmat_mn - 1/Kmat_nm)``.
    """
    r_m = check_spd(r_m, "r_m")
    r_n = check_spd(r_n, "r_n")
    v = r_m.shape[0] if v_samples is None else int(v_samples)
    if r_m.shape != r_n.shape or r_m.shape[0] != v:
        raise ValueError("R_m and R_n must both be V x V")
    k_mn = np.trace(np.linalg.solve(r_m, r_n)) / v
    k_nm = np.trace(np.linalg.solve(r_n, r_m)) / v
    den = k_mn - 1.0 / k_nm
    # k_mn k_nm >= 1 by Cauchy-Schwarz, with equality iff R_m ∝ R_n
    if den <= 1e-12 * k_mn:
        return _infinite(1, "proportional covariances")
    value = 1.0 / den / v
    if energy_ratio:
        value *= np.trace(r_n) / np.trace(r_m)
    return PairBound(float(value), np.array([value]), True)


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class BoundReport:
    """All ordered-pair bounds for one source configuration.

    ``pairwise[m, n]`` is the bound on ``ISR_{m,n}`` (NaN on the diagonal),
    ``per_dataset[m, n, k]`` its dataset-``k`` share, and
    ``total_normalized = sum_{m != n} V * pairwise[m, n]``.
    """

    pairwise: np.ndarray
    per_dataset: np.ndarray
    finite: np.ndarray
    regime: Regime
    v_samples: int
    diagnoses: Dict[tuple, str] = field(default_factory=dict)

    @property
    def n_sources(self) -> int:
        return self.pairwise.shape[0]

    @property
    def total_normalized(self) -> float:
        off = ~np.eye(self.n_sources, dtype=bool)
        if not self.finite[off].all():
            return float("inf")
        return float(self.v_samples * self.pairwise[off].sum())

    @property
    def all_finite(self) -> bool:
        return bool(self.finite[~np.eye(self.n_sources, dtype=bool)].all())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "n", "k", "bound", "finite", "regime"])
        n = self.n_sources
        for a in range(n):
            for b in range(n):
                if a == b:
                    continue
                for k, x in enumerate(self.per_dataset[a, b]):
                    w.writerow([a, b, k, repr(float(x)), bool(self.finite[a, b]), self.regime.value])
                w.writerow([a, b, "total", repr(float(self.pairwise[a, b])),
                            bool(self.finite[a, b]), self.regime.value])
        w.writerow(["all", "all", "total_normalized", repr(self.total_normalized),
                    self.all_finite, self.regime.value])
        return buf.getvalue()


def _regime(models: Sequence[SourceModel]) -> Regime:
    k = models[0].k_datasets
    iid = all(m.iid for m in models)
    if k == 1:
        return Regime.ICA_IID if iid else Regime.ICA_GAUSS
    if iid:
        if all(m.family in (Family.MPE, Family.GAUSSIAN) for m in models):
            return Regime.ELLIPTICAL
        return Regime.IID
    return Regime.GENERAL


def bound_report(models: Sequence[SourceModel], v_samples: int) -> BoundReport:
    """Evaluate the bound for every ordered pair of a model list."""
    n = len(models)
    if n < 2:
        raise ValueError("need at least two sources")
    k = models[0].k_datasets
    kms = k_matrices_for_models(models, v_samples)
    energy = [m.covariance() for m in models]
    pair = np.full((n, n), np.nan)
    per = np.full((n, n, k), np.nan)
    fin = np.ones((n, n), dtype=bool)
    diag = {}
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            pb = isr_bound_general(kms[(a, b)], kms[(b, a)], energy[a], energy[b], v_samples)
            pair[a, b] = pb.value
            per[a, b] = pb.per_dataset
            fin[a, b] = pb.finite
            if not pb.finite:
                diag[(a, b)] = pb.diagnosis
    return BoundReport(pair, per, fin, _regime(models), int(v_samples), diag)


# --------------------------------------------------------------------------
# monotonicity checks


@dataclass(frozen=True)
class MonotonicityVerdict:
    """Offending grid points for the two ordering properties.

    ``above_gaussian`` lists ``(kappa_m, kappa_n, bound, gaussian_bound)``
    where a non-Gaussian pair has a larger bound than the Gaussian pair with
    the same covariances; ``increasing_in_kappa`` lists
    ``(kappa_m_prev, kappa_m, kappa_n, bound_prev, bound)`` where raising
    ``kappa_m`` raised the bound.
    """

    above_gaussian: list
    increasing_in_kappa: list

    @property
    def ok(self) -> bool:
        return not self.above_gaussian and not self.increasing_in_kappa


def check_bound_monotonicity(r_m, r_n, kappa_m_grid: Sequence[float], kappa_n_grid: Sequence[float],
                             v_samples: int = 1, rtol: float = 1e-10) -> MonotonicityVerdict:
    """Check two ordering properties of the elliptical bound on a kappa grid.

    * Non-Gaussian sources never have a larger bound than Gaussian ones with
      the same covariances (``kappa = 1`` for both).
    * For fixed ``kappa_n`` and covariances, the bound on ``ISR_{m,n}`` does
      not increase with ``kappa_m``.

    Returns the list of offending grid points for each property.
    """
    gauss = isr_bound_elliptical(1.0, 1.0, r_m, r_n, v_samples).value
    above, rising = [], []
    for kn in kappa_n_grid:
        prev = None
        for km in sorted(kappa_m_grid):
            b = isr_bound_elliptical(km, kn, r_m, r_n, v_samples).value
            if b > gauss * (1 + rtol):
                above.append((km, kn, b, gauss))
            if prev is not None and b > prev[1] * (1 + rtol):
                rising.append((prev[0], km, kn, prev[1], b))
            prev = (km, b)
    return MonotonicityVerdict(above, rising)


def elliptical_bound_vs_beta(betas: Sequence[float], covariances: Sequence[np.ndarray],
                             v_samples: int) -> Dict[float, float]:
    """Total normalized bound for N MPE sources sharing one shape parameter."""
    out = {}
    for beta in betas:
        models = [SourceModel.mpe(beta, r / kappa_elliptical(beta, r.shape[0]).rho) for r in covariances]
        out[float(beta)] = bound_report(models, v_samples).total_normalized
    return out
