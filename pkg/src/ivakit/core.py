"""Domain types, small matrix helpers and seeded random streams.

Shapes follow one convention throughout the package:

* a source component matrix (SCM) is ``(K, V)``: row ``k`` is the source as
  it appears in dataset ``k``;
* stacked per-dataset matrices (observations, mixing, demixing) are arrays
  of shape ``(K, N, V)`` or ``(K, N, N)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SPD_RATIO = 1e-12
RECONSTRUCTION_RTOL = 1e-10
MAX_MIXING_CONDITION = 1e12


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def check_spd(matrix, name: str = "matrix") -> np.ndarray:
    """Validate a symmetric positive-definite matrix and return it as an array.

    The matrix must be square, symmetric to roundoff, and have
    ``min(eig) > 1e-12 * max(eig)``.
    """
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    scale = max(np.abs(m).max(), 1.0)
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    if eig[-1] <= 0 or eig[0] <= SPD_RATIO * eig[-1]:
        raise ValueError(f"{name} is not positive definite (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})")
    return m


def direct_sum(blocks: Sequence) -> np.ndarray:
    """Block-diagonal matrix with ``blocks`` on the diagonal, in order."""
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
    if not blocks:
        raise ValueError("empty direct sum")
    for b in blocks:
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ValueError(f"direct sum blocks must be square, got {b.shape}")
    size = sum(b.shape[0] for b in blocks)
    out = np.zeros((size, size))
    i = 0
    for b in blocks:
        d = b.shape[0]
        out[i:i + d, i:i + d] = b
        i += d
    return out


def hadamard_quotient_trace(a, c, d) -> float:
    """Return ``trace(a * c / d)`` with elementwise product and division.

    Only the diagonal enters the trace, but every entry of ``d`` is checked
    so that callers get the same error regardless of where a zero sits.
    """
    a, c, d = (np.asarray(x, dtype=float) for x in (a, c, d))
    if not (a.shape == c.shape == d.shape) or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("hadamard_quotient_trace needs three square matrices of equal size")
    if np.any(d == 0):
        raise ValueError("Hadamard division by zero")
    return float(np.trace(a * c / d))


def sqrtm_spd(matrix) -> np.ndarray:
    """Symmetric square root of an SPD matrix."""
    w, v = np.linalg.eigh(matrix)
    return (v * np.sqrt(w)) @ v.T


def inv_sqrtm_spd(matrix) -> np.ndarray:
    w, v = np.linalg.eigh(matrix)
    return (v / np.sqrt(w)) @ v.T


# --------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RngHandle:
    """A reproducible random stream identified by ``(seed, stream)``.

    Handles are split, never shared: :meth:`spawn` derives child streams
    deterministically so Monte-Carlo trials can run in any order.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))

    def spawn(self, index: int) -> "RngHandle":
        """Child handle for sub-stream ``index`` (e.g. a trial number)."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream), int(index)))
        child_seed = int(ss.generate_state(2, dtype=np.uint64)[0])
        return RngHandle(child_seed, int(index))


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngHandle`, a numpy generator or an int seed."""
    if isinstance(rng, RngHandle):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SourceComponentMatrix:
    """One source across all datasets; ``data[k]`` is its realization in dataset k."""

    data: np.ndarray

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if data.ndim != 2:
            raise ValueError("SCM data must be a K x V matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("SCM data has non-finite entries")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def k_datasets(self) -> int:
        return self.data.shape[0]

    @property
    def v_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DatasetEnsemble:
    """K observation matrices ``X[k] = A[k] S[k]`` with optional ground truth.

    ``observations`` has shape ``(K, N, V)``; ``mixing`` ``(K, N, N)``;
    ``sources`` is a list of N :class:`SourceComponentMatrix`.
    """

    observations: np.ndarray
    mixing: Optional[np.ndarray] = None
    sources: Optional[tuple] = None

    def __post_init__(self):
        x = np.asarray(self.observations, dtype=float)
        if x.ndim != 3:
            raise ValueError("observations must have shape (K, N, V)")
        if not np.all(np.isfinite(x)):
            raise ValueError("observations have non-finite entries")
        object.__setattr__(self, "observations", _frozen(x))
        k, n, _ = x.shape
        if self.mixing is not None:
            a = np.asarray(self.mixing, dtype=float)
            if a.shape != (k, n, n):
                raise ValueError(f"mixing must have shape {(k, n, n)}, got {a.shape}")
            for kk in range(k):
                if not np.isfinite(np.linalg.cond(a[kk])) or np.linalg.cond(a[kk]) > MAX_MIXING_CONDITION:
                    raise ValueError(f"mixing matrix {kk} is numerically singular")
            object.__setattr__(self, "mixing", _frozen(a))
        if self.sources is not None:
            srcs = tuple(s if isinstance(s, SourceComponentMatrix) else SourceComponentMatrix(s)
                         for s in self.sources)
            if len(srcs) != n:
                raise ValueError(f"expected {n} sources, got {len(srcs)}")
            for s in srcs:
                if s.data.shape != (k, x.shape[2]):
                    raise ValueError("source shape does not match observations")
            object.__setattr__(self, "sources", srcs)
            if self.mixing is not None:
                recon = np.einsum("kij,kjv->kiv", self.mixing, self.source_array())
                err = np.linalg.norm(recon - x) / max(np.linalg.norm(x), 1e-300)
                if err > RECONSTRUCTION_RTOL:
                    raise ValueError(f"X != A S (relative residual {err:.3g})")

    @property
    def shape(self) -> tuple:
        return self.observations.shape

    @property
    def k_datasets(self) -> int:
        return self.observations.shape[0]

    @property
    def n_sources(self) -> int:
        return self.observations.shape[1]

    @property
    def v_samples(self) -> int:
        return self.observations.shape[2]

    def source_array(self) -> np.ndarray:
        """Ground-truth sources stacked as ``(K, N, V)``."""
        if self.sources is None:
            raise ValueError("ensemble carries no ground-truth sources")
        return np.stack([s.data for s in self.sources], axis=1)


@dataclass(frozen=True)
class DemixingEnsemble:
    """K demixing matrices, shape ``(K, N, N)``."""

    matrices: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.matrices, dtype=float)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValueError("demixing matrices must have shape (K, N, N)")
        for k in range(w.shape[0]):
            if not np.isfinite(np.linalg.cond(w[k])) or np.linalg.cond(w[k]) > MAX_MIXING_CONDITION:
                raise ValueError(f"demixing matrix {k} is singular")
        object.__setattr__(self, "matrices", _frozen(w))

    @property
    def k_datasets(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_sources(self) -> int:
        return self.matrices.shape[1]

    def check_compatible(self, ensemble: DatasetEnsemble) -> None:
        if (self.k_datasets, self.n_sources) != ensemble.shape[:2]:
            raise ValueError("demixing ensemble does not match dataset ensemble shape")

    def apply(self, ensemble: DatasetEnsemble) -> np.ndarray:
        """Source estimates ``Y[k] = W[k] X[k]`` as ``(K, N, V)``."""
        self.check_compatible(ensemble)
        return np.einsum("kij,kjv->kiv", self.matrices, ensemble.observations)


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    MPE = "mpe"
    VECTOR_MA = "vector_ma"


@dataclass(frozen=True)
class SourceModel:
    """Statistical description of one source component vector.

    Build instances with :meth:`gaussian`, :meth:`mpe` or :meth:`vector_ma`.
    ``dispersion`` is the covariance ``R`` for Gaussian sources and the
    dispersion matrix for MPE sources. A Gaussian source may additionally
    carry ``sample_covariance``, the full ``KV x KV`` covariance of its
    vectorized SCM (sample-major ordering, index ``v*K + k``), to describe
    sample-to-sample dependence.
    """

    family: Family
    k_datasets: int
    shape_beta: Optional[float] = None
    dispersion: Optional[np.ndarray] = None
    ma_taps: Optional[np.ndarray] = None
    sample_covariance: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        k = int(self.k_datasets)
        if k < 1:
            raise ValueError("k_datasets must be positive")
        if fam is Family.MPE:
            if self.shape_beta is None or not self.shape_beta > 0:
                raise ValueError("MPE shape parameter beta must be > 0")
            if self.ma_taps is not None or self.sample_covariance is not None:
                raise ValueError("MPE model takes only shape_beta and dispersion")
        elif self.shape_beta is not None:
            raise ValueError(f"{fam.value} model takes no shape parameter")
        if fam in (Family.MPE, Family.GAUSSIAN):
            if self.dispersion is None:
                raise ValueError(f"{fam.value} model needs a dispersion/covariance matrix")
            disp = check_spd(self.dispersion, "dispersion")
            if disp.shape != (k, k):
                raise ValueError(f"dispersion must be {k} x {k}")
            object.__setattr__(self, "dispersion", _frozen(disp))
            if self.ma_taps is not None:
                raise ValueError(f"{fam.value} model takes no MA taps")
        if fam is Family.GAUSSIAN and self.sample_covariance is not None:
            sc = check_spd(self.sample_covariance, "sample_covariance")
            if sc.shape[0] % k:
                raise ValueError("sample_covariance size must be a multiple of K")
            v = sc.shape[0] // k
            lag0 = np.mean([sc[i * k:(i + 1) * k, i * k:(i + 1) * k] for i in range(v)], axis=0)
            if not np.allclose(lag0, self.dispersion, atol=1e-8 * np.abs(lag0).max()):
                raise ValueError("sample_covariance diagonal blocks must average to the dispersion")
            object.__setattr__(self, "sample_covariance", _frozen(sc))
        if fam is Family.VECTOR_MA:
            if self.ma_taps is None or len(self.ma_taps) == 0:
                raise ValueError("empty tap list")
            taps = np.asarray(self.ma_taps, dtype=float)
            if taps.ndim != 3 or taps.shape[1:] != (k, k):
                raise ValueError(f"MA taps must have shape (L, {k}, {k})")
            if self.dispersion is not None:
                raise ValueError("vector MA model takes no dispersion")
            object.__setattr__(self, "ma_taps", _frozen(taps))
        object.__setattr__(self, "k_datasets", k)

    @classmethod
    def gaussian(cls, covariance, sample_covariance=None) -> "SourceModel":
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        return cls(Family.GAUSSIAN, cov.shape[0], dispersion=cov, sample_covariance=sample_covariance)

    @classmethod
    def mpe(cls, beta: float, dispersion) -> "SourceModel":
        disp = np.atleast_2d(np.asarray(dispersion, dtype=float))
        return cls(Family.MPE, disp.shape[0], shape_beta=float(beta), dispersion=disp)

    @classmethod
    def vector_ma(cls, taps) -> "SourceModel":
        taps = np.asarray(taps, dtype=float)
        if taps.ndim != 3:
            raise ValueError("MA taps must have shape (L, K, K)")
        return cls(Family.VECTOR_MA, taps.shape[1], ma_taps=taps)

    @property
    def is_gaussian(self) -> bool:
        """True when the whole SCM is jointly Gaussian."""
        return self.family in (Family.GAUSSIAN, Family.VECTOR_MA) or (
            self.family is Family.MPE and self.shape_beta == 1.0)

    @property
    def iid(self) -> bool:
        if self.family is Family.VECTOR_MA:
            return len(self.ma_taps) == 1
        return self.sample_covariance is None

    def lag_covariance(self, lag: int) -> np.ndarray:
        """``E[s(v+lag) s(v)^T]`` for stationary models (``lag >= 0``)."""
        if lag < 0:
            return self.lag_covariance(-lag).T
        if self.family is Family.VECTOR_MA:
            taps = self.ma_taps
            out = np.zeros((self.k_datasets, self.k_datasets))
            for j in range(len(taps) - lag):
                out += taps[j + lag] @ taps[j].T
            return out
        if self.sample_covariance is not None:
            raise ValueError("lag covariance of a nonstationary description is not defined")
        if lag > 0:
            return np.zeros((self.k_datasets, self.k_datasets))
        return self.covariance()

    def covariance(self) -> np.ndarray:
        """Per-sample covariance ``R = E[s(v) s(v)^T]`` (K x K)."""
        if self.family is Family.VECTOR_MA:
            return self.lag_covariance(0)
        if self.family is Family.GAUSSIAN:
            return np.array(self.dispersion)
        from .score import mpe_rho
        return mpe_rho(self.shape_beta, self.k_datasets) * np.array(self.dispersion)

    def full_covariance(self, v_samples: int) -> np.ndarray:
        """Covariance of ``vec(S_n)`` in sample-major ordering (``v*K + k``)."""
        k = self.k_datasets
        if self.sample_covariance is not None:
            if self.sample_covariance.shape[0] != k * v_samples:
                raise ValueError("sample_covariance was built for a different V")
            return np.array(self.sample_covariance)
        out = np.zeros((k * v_samples, k * v_samples))
        max_lag = len(self.ma_taps) - 1 if self.family is Family.VECTOR_MA else 0
        for lag in range(min(max_lag, v_samples - 1) + 1):
            c = self.lag_covariance(lag)
            for v in range(v_samples - lag):
                # block (v+lag, v) holds E[s(v+lag) s(v)^T]
                out[(v + lag) * k:(v + lag + 1) * k, v * k:(v + 1) * k] = c
                if lag:
                    out[v * k:(v + 1) * k, (v + lag) * k:(v + lag + 1) * k] = c.T
        return out
