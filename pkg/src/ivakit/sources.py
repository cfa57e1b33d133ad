"""Source samplers, random mixing and an on-disk ensemble format."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (DatasetEnsemble, Family, SourceComponentMatrix, SourceModel,
                   as_generator, check_spd)


def sample_mpe_scv(model: SourceModel, v_samples: int, rng) -> SourceComponentMatrix:
    """Draw V i.i.d. columns from a multivariate power exponential.

    The radius uses the exact transform ``t = r**(2 beta) / 2 ~ Gamma(K/(2 beta))``
    and the direction is uniform on the sphere, so no rejection step is
    needed.  Columns are coloured with the Cholesky factor of the
    dispersion, which gives the same law as the symmetric square root.
    """
    if model.family is not Family.MPE:
        raise ValueError("sample_mpe_scv needs an MPE model")
    if v_samples < 1:
        raise ValueError("v_samples must be >= 1")
    gen = as_generator(rng)
    k, beta = model.k_datasets, model.shape_beta
    t = gen.gamma(k / (2.0 * beta), 1.0, size=v_samples)
    r = (2.0 * t) ** (1.0 / (2.0 * beta))
    u = gen.standard_normal((k, v_samples))
    u /= np.linalg.norm(u, axis=0)
    chol = np.linalg.cholesky(model.dispersion)
    return SourceComponentMatrix(chol @ (u * r))


def sample_gaussian_scv(covariance, v_samples: int, rng) -> SourceComponentMatrix:
    """V i.i.d. zero-mean Gaussian columns with the given covariance."""
    cov = check_spd(covariance, "covariance")
    if v_samples < 1:
        raise ValueError("v_samples must be >= 1")
    gen = as_generator(rng)
    z = gen.standard_normal((cov.shape[0], v_samples))
    return SourceComponentMatrix(np.linalg.cholesky(cov) @ z)


def sample_vector_ma(model: SourceModel, v_samples: int, rng) -> SourceComponentMatrix:
    """Vector moving average ``s(v) = sum_l B_l z(v - l)`` of white Gaussian noise.

    ``L - 1`` extra innovations are drawn up front so that the first output
    sample already has a full history and the process is stationary.
    """
    if model.family is not Family.VECTOR_MA:
        raise ValueError("sample_vector_ma needs a vector MA model")
    if v_samples < 1:
        raise ValueError("v_samples must be >= 1")
    gen = as_generator(rng)
    taps = model.ma_taps
    n_taps, k = taps.shape[0], taps.shape[1]
    z = gen.standard_normal((k, v_samples + n_taps - 1))
    s = np.zeros((k, v_samples))
    for lag in range(n_taps):
        start = n_taps - 1 - lag
        s += taps[lag] @ z[:, start:start + v_samples]
    return SourceComponentMatrix(s)


def _sample_full_gaussian(model: SourceModel, v_samples: int, gen) -> SourceComponentMatrix:
    k = model.k_datasets
    full = model.full_covariance(v_samples)
    vec = np.linalg.cholesky(full) @ gen.standard_normal(full.shape[0])
    # sample-major: entry v*K + k
    return SourceComponentMatrix(vec.reshape(v_samples, k).T)


def sample_scv(model: SourceModel, v_samples: int, rng) -> SourceComponentMatrix:
    """Dispatch to the sampler that matches ``model.family``."""
    gen = as_generator(rng)
    if model.family is Family.MPE:
        return sample_mpe_scv(model, v_samples, gen)
    if model.family is Family.VECTOR_MA:
        return sample_vector_ma(model, v_samples, gen)
    if model.sample_covariance is not None:
        return _sample_full_gaussian(model, v_samples, gen)
    return sample_gaussian_scv(model.dispersion, v_samples, gen)


# --------------------------------------------------------------------------
# mixing


@dataclass(frozen=True)
class MixingSpec:
    """How mixing matrices are drawn.

    Entries are i.i.d. standard normal; a draw whose condition number exceeds
    ``max_condition`` is discarded and redrawn, up to ``max_attempts`` times
    per dataset.  ``identity=True`` skips the draw and uses ``A = I``.
    """

    n_sources: int
    k_datasets: int
    max_condition: float = 1e6
    max_attempts: int = 100
    identity: bool = False

    def draw(self, rng) -> np.ndarray:
        n, k = self.n_sources, self.k_datasets
        if self.identity:
            return np.tile(np.eye(n), (k, 1, 1))
        gen = as_generator(rng)
        out = np.empty((k, n, n))
        for kk in range(k):
            for _ in range(self.max_attempts):
                a = gen.standard_normal((n, n))
                if np.linalg.cond(a) <= self.max_condition:
                    out[kk] = a
                    break
            else:
                raise RuntimeError(
                    f"no mixing matrix with condition <= {self.max_condition:g} "
                    f"after {self.max_attempts} attempts")
        return out


def mix(sources: Sequence[SourceComponentMatrix], spec: MixingSpec, rng) -> DatasetEnsemble:
    """Stack the sources per dataset and apply freshly drawn mixing matrices."""
    sources = [s if isinstance(s, SourceComponentMatrix) else SourceComponentMatrix(s) for s in sources]
    if len(sources) != spec.n_sources:
        raise ValueError(f"spec expects {spec.n_sources} sources, got {len(sources)}")
    shapes = {s.data.shape for s in sources}
    if len(shapes) != 1:
        raise ValueError(f"sources disagree in shape: {sorted(shapes)}")
    k, _ = shapes.pop()
    if k != spec.k_datasets:
        raise ValueError(f"spec expects K={spec.k_datasets}, sources have K={k}")
    s = np.stack([src.data for src in sources], axis=1)
    a = spec.draw(rng)
    x = np.einsum("kij,kjv->kiv", a, s)
    return DatasetEnsemble(observations=x, mixing=a, sources=tuple(sources))


# --------------------------------------------------------------------------
# serialization

_FMT = "{:.17g}"


def _write_stack(path: Path, arr: np.ndarray, label: str) -> None:
    # one row per (dataset, column); entries of that column across rows of the matrix
    k, rows, cols = arr.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "column"] + [f"{label}{i}" for i in range(rows)])
        for kk in range(k):
            for c in range(cols):
                w.writerow([kk, c] + [_FMT.format(x) for x in arr[kk, :, c]])


def _read_stack(path: Path, k: int, rows: int, cols: int) -> np.ndarray:
    out = np.empty((k, rows, cols))
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for line in r:
            out[int(line[0]), :, int(line[1])] = [float(x) for x in line[2:]]
    return out


def save_ensemble(ensemble: DatasetEnsemble, directory, metadata: dict | None = None) -> Path:
    """Write ``observations.csv`` (plus mixing/sources when present) and ``ensemble.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    k, n, v = ensemble.shape
    _write_stack(d / "observations.csv", ensemble.observations, "x")
    meta = {"k_datasets": k, "n_sources": n, "v_samples": v,
            "has_mixing": ensemble.mixing is not None,
            "has_sources": ensemble.sources is not None}
    if ensemble.mixing is not None:
        _write_stack(d / "mixing.csv", ensemble.mixing, "a")
    if ensemble.sources is not None:
        _write_stack(d / "sources.csv", ensemble.source_array(), "s")
    meta.update(metadata or {})
    (d / "ensemble.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_ensemble(directory) -> tuple[DatasetEnsemble, dict]:
    d = Path(directory)
    meta = json.loads((d / "ensemble.json").read_text())
    k, n, v = meta["k_datasets"], meta["n_sources"], meta["v_samples"]
    x = _read_stack(d / "observations.csv", k, n, v)
    a = _read_stack(d / "mixing.csv", k, n, n) if meta.get("has_mixing") else None
    srcs = None
    if meta.get("has_sources"):
        s = _read_stack(d / "sources.csv", k, n, v)
        srcs = tuple(SourceComponentMatrix(s[:, i, :]) for i in range(n))
    return DatasetEnsemble(observations=x, mixing=a, sources=srcs), meta
