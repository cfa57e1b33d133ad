"""Global demixing-mixing matrices, ISR and trial bookkeeping."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DemixingEnsemble


def _w(w):
    return w.matrices if isinstance(w, DemixingEnsemble) else np.asarray(w, dtype=float)


def global_matrices(w, a) -> np.ndarray:
    """``G^[k] = W^[k] A^[k]`` stacked as ``(K, N, N)``."""
    wa, aa = _w(w), np.asarray(a, dtype=float)
    if wa.shape != aa.shape or wa.ndim != 3:
        raise ValueError(f"shape mismatch: {wa.shape} vs {aa.shape}")
    return np.einsum("kij,kjl->kil", wa, aa)


@dataclass(frozen=True)
class IsrResult:
    per_dataset: np.ndarray   # (K, N, N), zero diagonal
    pairwise: np.ndarray      # (N, N), zero diagonal
    total_normalized: Optional[float]


def isr_from_g(g, energies=None, v_samples: Optional[int] = None) -> IsrResult:
    """ISR of an aligned global matrix ensemble.

    ``ISR^[k]_{m,n} = g_{m,n}^2 E|s_n^[k]|^2 / E|s_m^[k]|^2``, summed over k
    for ``ISR_{m,n}``; the total normalized ISR is ``V sum_{m != n} ISR_{m,n}``.

    Parameters
    ----------
    g : ndarray (K, N, N)
        Global matrices with unit diagonal (see :func:`align`).
    energies : ndarray (K, N), optional
        Per-dataset source second moments; equal energies if omitted.
    v_samples : int, optional
        Needed for the total normalized ISR.
    """
    g = np.asarray(g, dtype=float)
    k, n, _ = g.shape
    e = np.ones((k, n)) if energies is None else np.asarray(energies, dtype=float)
    if e.shape != (k, n):
        raise ValueError(f"energies must have shape {(k, n)}")
    if np.any(e == 0):
        raise ValueError("zero source second moment")
    per = g**2 * e[:, None, :] / e[:, :, None]
    per[:, np.arange(n), np.arange(n)] = 0.0
    pair = per.sum(axis=0)
    total = None if v_samples is None else float(v_samples * pair.sum())
    return IsrResult(per, pair, total)


def trial_success(g):
    """Whether the row-wise argmax of ``|G^[k]|`` is one permutation shared by all datasets.

    Returns ``(True, perm)`` with ``perm[i]`` the source picked up by row
    ``i``, or ``(False, None)``.
    """
    g = np.asarray(g)
    am = np.abs(g).argmax(axis=2)
    n = g.shape[1]
    first = am[0]
    if len(set(first.tolist())) != n:
        return False, None
    if np.any(am != first):
        return False, None
    return True, tuple(int(i) for i in first)


def _assignment_score(s, perm):
    return sum(s[i, p] for i, p in enumerate(perm))


def greedy_assignment(s) -> tuple:
    """Pick the largest remaining entry of ``s`` repeatedly; returns ``perm[row] = col``."""
    s = np.array(s, dtype=float)
    n = s.shape[0]
    perm = [-1] * n
    for _ in range(n):
        i, j = np.unravel_index(np.argmax(s), s.shape)
        perm[i] = int(j)
        s[i, :] = -np.inf
        s[:, j] = -np.inf
    return tuple(perm)


def exhaustive_assignment(s) -> tuple:
    n = s.shape[0]
    return max(itertools.permutations(range(n)), key=lambda p: _assignment_score(s, p))


@dataclass(frozen=True)
class Alignment:
    demixing: np.ndarray
    g: np.ndarray
    permutation: tuple


def align(w, a) -> Alignment:
    """Reorder and rescale the rows of W so that ``G = W A`` has unit diagonal.

    The row order maximizes ``sum_k sum_i |g^[k]_{i, perm(i)}|`` on
    row-normalized magnitudes, so the scale ambiguity does not bias it.
    Greedy assignment is used, and for ``N <= 6`` the exhaustive optimum
    replaces it when strictly better.
    """
    wa = _w(w)
    g = global_matrices(wa, a)
    mag = np.abs(g) / np.linalg.norm(g, axis=2, keepdims=True)
    s = mag.sum(axis=0)
    perm = greedy_assignment(s)
    if s.shape[0] <= 6:
        ex = exhaustive_assignment(s)
        if _assignment_score(s, ex) > _assignment_score(s, perm):
            perm = ex
    order = np.argsort(perm)          # new row n is old row order[n]
    w_al = wa[:, order, :]
    g_al = g[:, order, :]
    d = np.einsum("kii->ki", g_al)
    w_al = w_al / d[:, :, None]
    g_al = g_al / d[:, :, None]
    return Alignment(w_al, g_al, tuple(int(p) for p in perm))


@dataclass(frozen=True)
class TrialOutcome:
    g_ensemble: np.ndarray
    isr_pairwise: np.ndarray
    isr_total_normalized: float
    success: bool
    permutation: Optional[tuple]


def evaluate_trial(w, a, v_samples: int, energies=None) -> TrialOutcome:
    """Success verdict on the raw estimate plus ISR after alignment."""
    g = global_matrices(w, a)
    ok, _ = trial_success(g)
    al = align(w, a)
    isr = isr_from_g(al.g, energies, v_samples)
    return TrialOutcome(al.g, isr.pairwise, isr.total_normalized, ok, al.permutation)
