"""Monte-Carlo experiment runner.

An experiment is described by an INI file with a single ``[experiment]``
section (see ``docs/config.md``).  Running it writes four files to the
output directory:

``trials.csv``
    one row per (grid point, trial);
``curve.csv``
    one row per grid point with the aggregated ISR, its Monte-Carlo
    standard error, the bound and the success rate;
``isr.svg``
    aggregated ISR against the grid with the bound overlaid;
``summary.json``
    config echo, curve and wall-clock time.

Fixed experiment parameters (covariances, MA taps) come from stream 0 of
the master seed; trial ``t`` of grid block ``g`` uses the child stream
``RngHandle(seed, 1 + g).spawn(t)``.  Results are therefore independent of
execution order and of the number of worker processes.
"""

from __future__ import annotations

import configparser
import csv
import enum
import io
import json
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .algos import FitOptions, fit_iva_mpe, fit_jdiag_sos
from .bounds import bound_report
from .core import RngHandle, SourceModel
from .metrics import evaluate_trial
from .score import mpe_rho
from .sources import MixingSpec, mix, sample_scv


class Kind(str, enum.Enum):
    MPE_CORRELATED = "mpe_correlated"
    MPE_BETA_SELECT = "mpe_beta_select"
    MPE_IDENTITY = "mpe_identity"
    JDIAG_LAGS = "jdiag_lags"
    CUSTOM = "custom"


class Aggregation(str, enum.Enum):
    MEAN_SUCCESSFUL = "mean_successful"
    MEDIAN_ALL = "median_all"


DEFAULT_BETAS = (0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0)

_PRESETS = {
    Kind.MPE_CORRELATED: dict(n_sources=3, k_datasets=5, aggregation=Aggregation.MEAN_SUCCESSFUL,
                              covariance="random"),
    Kind.MPE_BETA_SELECT: dict(n_sources=3, k_datasets=5, aggregation=Aggregation.MEAN_SUCCESSFUL,
                               covariance="random", beta_candidates=(0.5, 2.0)),
    Kind.MPE_IDENTITY: dict(n_sources=3, k_datasets=5, aggregation=Aggregation.MEDIAN_ALL,
                            covariance="identity"),
    Kind.JDIAG_LAGS: dict(n_sources=3, k_datasets=3, v_samples=(1000,), aggregation=Aggregation.MEAN_SUCCESSFUL,
                          lags=tuple(range(1, 11)), ma_order=4, trials=100),
    Kind.CUSTOM: dict(),
}


class ConfigError(ValueError):
    """Schema violation, with the offending line number in the message."""


@dataclass(frozen=True)
class ExperimentConfig:
    kind: Kind
    n_sources: int = 3
    k_datasets: int = 5
    v_samples: tuple = (10000,)
    betas: tuple = DEFAULT_BETAS
    trials: int = 200
    seed: int = 0
    aggregation: Aggregation = Aggregation.MEAN_SUCCESSFUL
    output: str = "results"
    covariance: str = "random"
    beta_candidates: Optional[tuple] = None
    restarts: int = 1
    max_iterations: int = 2048
    lags: tuple = tuple(range(1, 11))
    ma_order: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n_sources < 2 or self.k_datasets < 1:
            raise ValueError("need n_sources >= 2 and k_datasets >= 1")
        if not self.v_samples or any(v < 2 for v in self.v_samples):
            raise ValueError("v_samples must list integers >= 2")
        if self.is_mpe and not self.betas:
            raise ValueError("beta grid must be nonempty")
        if any(b <= 0 for b in self.betas):
            raise ValueError("betas must be > 0")
        if self.covariance not in ("random", "identity"):
            raise ValueError("covariance must be 'random' or 'identity'")
        if self.kind is Kind.JDIAG_LAGS and (not self.lags or min(self.lags) < 1 or self.ma_order < 1):
            raise ValueError("lags must be >= 1 and ma_order >= 1")

    @property
    def is_mpe(self) -> bool:
        return self.kind is not Kind.JDIAG_LAGS

    @classmethod
    def preset(cls, kind, **overrides) -> "ExperimentConfig":
        kind = Kind(kind)
        return cls(kind=kind, **{**_PRESETS[kind], **overrides})

    def grid(self) -> list:
        """Grid points as dicts; MPE kinds use every (V, beta), JDIAG every lag count."""
        if self.kind is Kind.JDIAG_LAGS:
            return [{"v_samples": self.v_samples[0], "lags": lag} for lag in self.lags]
        return [{"v_samples": v, "beta": b} for v in self.v_samples for b in self.betas]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["aggregation"] = self.aggregation.value
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# config files

_INT_KEYS = {"n_sources", "k_datasets", "trials", "seed", "restarts", "max_iterations", "ma_order"}
_INT_LIST_KEYS = {"v_samples", "lags"}
_FLOAT_LIST_KEYS = {"betas", "beta_candidates"}
_STR_KEYS = {"kind", "aggregation", "output", "covariance"}
_ALL_KEYS = _INT_KEYS | _INT_LIST_KEYS | _FLOAT_LIST_KEYS | _STR_KEYS


def _key_lines(text: str) -> dict:
    lines = {}
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([A-Za-z_][\w.]*)\s*[=:]", line)
        if m and m.group(1) not in lines:
            lines[m.group(1)] = i
    return lines


def _int_list(raw: str) -> tuple:
    out = []
    for part in raw.split(","):
        part = part.strip()
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        if m:
            out.extend(range(int(m.group(1)), int(m.group(2)) + 1))
        else:
            # accept 1e4 style integers
            val = float(part)
            if not val.is_integer():
                raise ValueError(part)
            out.append(int(val))
    return tuple(out)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse an experiment config; errors name the file and line."""
    lines = _key_lines(text)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        prefix = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{prefix}: {exc.message if hasattr(exc, 'message') else exc}") from None
    if parser.sections() != ["experiment"]:
        raise ConfigError(f"{source}:1: expected exactly one [experiment] section, found {parser.sections()}")
    sec = parser["experiment"]

    def fail(key, msg):
        raise ConfigError(f"{source}:{lines.get(key, 1)}: {key}: {msg}")

    values = {}
    for key, raw in sec.items():
        if key not in _ALL_KEYS:
            fail(key, "unknown key")
        try:
            if key in _INT_KEYS:
                values[key] = int(raw)
            elif key in _INT_LIST_KEYS:
                values[key] = _int_list(raw)
            elif key in _FLOAT_LIST_KEYS:
                values[key] = tuple(float(p) for p in raw.split(","))
            else:
                values[key] = raw.strip()
        except ValueError:
            fail(key, f"cannot parse {raw!r}")
    if "kind" not in values:
        raise ConfigError(f"{source}:1: missing required key 'kind'")
    try:
        kind = Kind(values.pop("kind"))
    except ValueError:
        fail("kind", f"must be one of {[k.value for k in Kind]}")
    if "aggregation" in values:
        try:
            values["aggregation"] = Aggregation(values["aggregation"])
        except ValueError:
            fail("aggregation", f"must be one of {[a.value for a in Aggregation]}")
    try:
        return ExperimentConfig.preset(kind, **values)
    except ValueError as exc:
        bad = next((k for k in values if k in str(exc) or k.rstrip("s") in str(exc)), "kind")
        fail(bad, str(exc))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


# --------------------------------------------------------------------------
# experiment setup


def random_correlation(k: int, gen) -> np.ndarray:
    """Random correlation matrix from ``B B^T + 0.1 I`` with unit diagonal."""
    b = gen.standard_normal((k, k))
    r = b @ b.T + 0.1 * np.eye(k)
    d = np.sqrt(np.diag(r))
    return r / np.outer(d, d)


def random_ma_taps(order: int, k: int, gen) -> np.ndarray:
    """Standard normal taps rescaled so every component has unit variance."""
    taps = gen.standard_normal((order, k, k))
    var = np.einsum("lij,lij->i", taps, taps)
    return taps / np.sqrt(var)[None, :, None]


@dataclass(frozen=True)
class Setup:
    """Per-experiment fixed parameters drawn from stream 0."""

    covariances: Optional[list] = None
    taps: Optional[list] = None


def make_setup(cfg: ExperimentConfig) -> Setup:
    gen = RngHandle(cfg.seed, 0).generator()
    if cfg.kind is Kind.JDIAG_LAGS:
        return Setup(taps=[random_ma_taps(cfg.ma_order, cfg.k_datasets, gen) for _ in range(cfg.n_sources)])
    if cfg.covariance == "identity":
        return Setup(covariances=[np.eye(cfg.k_datasets)] * cfg.n_sources)
    return Setup(covariances=[random_correlation(cfg.k_datasets, gen) for _ in range(cfg.n_sources)])


def source_models(cfg: ExperimentConfig, setup: Setup, point: dict) -> List[SourceModel]:
    """Models for one grid point; MPE dispersions give each source covariance R."""
    if cfg.kind is Kind.JDIAG_LAGS:
        return [SourceModel.vector_ma(t) for t in setup.taps]
    beta = point["beta"]
    rho = mpe_rho(beta, cfg.k_datasets)
    return [SourceModel.mpe(beta, r / rho) for r in setup.covariances]


def _fit_options(cfg: ExperimentConfig, beta: float) -> FitOptions:
    cands = (beta,) if cfg.kind is not Kind.MPE_BETA_SELECT else tuple(cfg.beta_candidates or (0.5, 2.0))
    if cfg.kind is Kind.CUSTOM and cfg.beta_candidates:
        cands = tuple(cfg.beta_candidates)
    return FitOptions(max_iterations=cfg.max_iterations, beta_candidates=cands, restarts=cfg.restarts)


# --------------------------------------------------------------------------
# trials


def _run_task(args):
    """One unit of work: an MPE (grid point, trial) or a JDIAG trial over all lags."""
    cfg, setup, block, trial, points = args
    handle = RngHandle(cfg.seed, 1 + block).spawn(trial)
    gen = handle.generator()
    rows = []
    models = source_models(cfg, setup, points[0])
    v = points[0]["v_samples"]
    try:
        x = mix([sample_scv(m, v, gen) for m in models], MixingSpec(cfg.n_sources, cfg.k_datasets), gen)
        energies = np.stack([np.diag(m.covariance()) for m in models], axis=1)
    except Exception as exc:  # recorded, never aborts the sweep
        return [_error_row(cfg, p, trial, handle, exc) for p in points]
    for p in points:
        try:
            if cfg.kind is Kind.JDIAG_LAGS:
                fit = fit_jdiag_sos(x, p["lags"])
            else:
                fit = fit_iva_mpe(x, _fit_options(cfg, p["beta"]), gen)
            out = evaluate_trial(fit.demixing, x.mixing, v, energies)
            rows.append(dict(point=p, trial=trial, stream_seed=handle.seed, success=out.success,
                             converged=fit.converged, iterations=fit.iterations,
                             isr_total=out.isr_total_normalized, isr_pairwise=out.isr_pairwise * v,
                             selected_beta=fit.beta, error=""))
        except Exception as exc:
            rows.append(_error_row(cfg, p, trial, handle, exc))
    return rows


def _error_row(cfg, point, trial, handle, exc):
    n = cfg.n_sources
    return dict(point=point, trial=trial, stream_seed=handle.seed, success=False, converged=False,
                iterations=0, isr_total=float("nan"), isr_pairwise=np.full((n, n), np.nan),
                selected_beta=None, error=f"{type(exc).__name__}: {exc}")


def _tasks(cfg: ExperimentConfig, setup: Setup):
    grid = cfg.grid()
    if cfg.kind is Kind.JDIAG_LAGS:
        # the same data serve every lag count, so one task covers a whole trial
        return [(cfg, setup, 0, t, grid) for t in range(cfg.trials)]
    return [(cfg, setup, g, t, [p]) for g, p in enumerate(grid) for t in range(cfg.trials)]


# --------------------------------------------------------------------------
# aggregation


def aggregate(values: Sequence[float], success: Sequence[bool], how: Aggregation):
    """Aggregated ISR and its Monte-Carlo standard error.

    ``mean_successful`` averages successful trials (standard error of the
    mean); ``median_all`` takes the median of every trial, with standard
    error ``1.2533 * 1.4826 * MAD / sqrt(n)``.
    """
    vals = np.asarray(values, dtype=float)
    ok = np.asarray(success, dtype=bool) & np.isfinite(vals)
    if how is Aggregation.MEAN_SUCCESSFUL:
        sel = vals[ok]
        if sel.size == 0:
            return float("nan"), float("nan")
        se = sel.std(ddof=1) / math.sqrt(sel.size) if sel.size > 1 else float("nan")
        return float(sel.mean()), float(se)
    sel = vals[np.isfinite(vals)]
    if sel.size == 0:
        return float("nan"), float("nan")
    med = float(np.median(sel))
    mad = float(np.median(np.abs(sel - med)))
    return med, 1.2533 * 1.4826 * mad / math.sqrt(sel.size)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return repr(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] if isinstance(r[h], str) else _fmt(r[h]) for h in header])
    return buf.getvalue()


def _grid_label(cfg):
    return "lags" if cfg.kind is Kind.JDIAG_LAGS else "beta"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trials: list
    curve: list
    trials_csv: str
    curve_csv: str
    summary: dict
    paths: dict = field(default_factory=dict)


def compute_bounds(cfg: ExperimentConfig, setup: Setup) -> dict:
    """Bound for each grid point, keyed by the tuple of grid values."""
    out = {}
    # stationary MA bounds need a dense K*V system and do not depend on the lag count
    cache = {}
    for p in cfg.grid():
        key = tuple(sorted(p.items()))
        model_key = (p.get("beta"), p["v_samples"])
        if model_key not in cache:
            cache[model_key] = bound_report(source_models(cfg, setup, p), p["v_samples"])
        rep = cache[model_key]
        out[key] = {"bound": rep.total_normalized, "bound_finite": rep.all_finite}
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1, write: bool = True,
                   bounds: Optional[dict] = None) -> ExperimentResult:
    """Run every trial of ``cfg`` and write the result bundle.

    Parameters
    ----------
    cfg : ExperimentConfig
    out_dir : path, optional
        Defaults to ``cfg.output``.
    threads : int
        Worker processes; results do not depend on this value.
    write : bool
        Skip writing files when False.
    bounds : dict, optional
        Precomputed output of :func:`compute_bounds` (it is deterministic,
        so callers running the same config twice can share it).
    """
    t0 = time.perf_counter()
    setup = make_setup(cfg)
    tasks = _tasks(cfg, setup)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_task, tasks))
    else:
        chunks = [_run_task(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    grid = cfg.grid()
    order = {tuple(sorted(p.items())): i for i, p in enumerate(grid)}
    rows.sort(key=lambda r: (order[tuple(sorted(r["point"].items()))], r["trial"]))
    if bounds is None:
        bounds = compute_bounds(cfg, setup)

    label = _grid_label(cfg)
    n = cfg.n_sources
    pair_cols = [f"isr_{a}_{b}" for a in range(n) for b in range(n) if a != b]
    trial_rows = []
    for r in rows:
        row = {"v_samples": r["point"]["v_samples"], label: r["point"][label], "trial": r["trial"],
               "stream_seed": r["stream_seed"], "success": r["success"], "converged": r["converged"],
               "iterations": r["iterations"], "isr_total": r["isr_total"],
               "selected_beta": " ".join(_fmt(b) for b in r["selected_beta"]) if r["selected_beta"] else "",
               "error": r["error"]}
        for a in range(n):
            for b in range(n):
                if a != b:
                    row[f"isr_{a}_{b}"] = r["isr_pairwise"][a, b]
        trial_rows.append(row)
    trial_header = ["v_samples", label, "trial", "stream_seed", "success", "converged", "iterations",
                    "isr_total"] + pair_cols + ["selected_beta", "error"]

    curve = []
    for p in grid:
        key = tuple(sorted(p.items()))
        sel = [r for r in rows if tuple(sorted(r["point"].items())) == key]
        vals = [r["isr_total"] for r in sel]
        succ = [r["success"] for r in sel]
        agg, se = aggregate(vals, succ, cfg.aggregation)
        c = {"v_samples": p["v_samples"], label: p[label], "isr": agg, "isr_stderr": se,
             "bound": bounds[key]["bound"], "bound_finite": bounds[key]["bound_finite"],
             "success_rate": float(np.mean(succ)), "n_trials": len(sel),
             "n_errors": sum(1 for r in sel if r["error"])}
        curve.append(c)
    curve_header = ["v_samples", label, "isr", "isr_stderr", "bound", "bound_finite",
                    "success_rate", "n_trials", "n_errors"]

    trials_csv = _csv(trial_header, trial_rows)
    curve_csv = _csv(curve_header, curve)
    summary = {"config": cfg.to_dict(), "aggregation": cfg.aggregation.value,
               "curve": [{k: (v if not isinstance(v, float) or math.isfinite(v) else _fmt(v))
                          for k, v in c.items()} for c in curve],
               "wall_clock_seconds": round(time.perf_counter() - t0, 3)}
    result = ExperimentResult(cfg, trial_rows, curve, trials_csv, curve_csv, summary)
    if write:
        d = Path(out_dir if out_dir is not None else cfg.output)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"trials": d / "trials.csv", "curve": d / "curve.csv", "plot": d / "isr.svg",
                 "summary": d / "summary.json"}
        paths["trials"].write_text(trials_csv)
        paths["curve"].write_text(curve_csv)
        from .plots import plot_curve
        plot_curve(cfg, curve, paths["plot"])
        summary["files"] = {k: str(v) for k, v in paths.items()}
        paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
        result.paths = paths
    return result


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Copy of ``cfg`` with the non-None keyword values replaced."""
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
