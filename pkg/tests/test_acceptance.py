"""Acceptance criteria 1-10 at their stated tolerances.

Each test records one PASS/FAIL line that is printed in the terminal
summary.  Criteria 6-8 run the shipped experiment configs at full size and
share their results with criterion 9; the whole module takes about 25
minutes on one core.  Deselect it with ``-m "not acceptance"``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import block_diag, toeplitz

from ivakit.bounds import (check_bound_monotonicity, isr_bound_elliptical, isr_bound_general,
                           isr_bound_ica_iid)
from ivakit.core import SourceModel
from ivakit.fim import empirical_fim, fim_for_models
from ivakit.harness import Aggregation, aggregate, load_config, run_experiment, with_overrides
from ivakit.ident import verify_fim_singularity
from ivakit.score import estimate_gamma_mc, kappa_elliptical, mpe_rho

from conftest import random_corr, random_spd, record

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
_RUNS = {}


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


def _db(ratio):
    return 10 * math.log10(ratio)


def _experiment(name, tmp_path_factory):
    """Run a shipped config once per session; returns (result, seconds)."""
    if name not in _RUNS:
        cfg = load_config(CONFIGS / name)
        out = tmp_path_factory.mktemp(name.split(".")[0])
        t0 = time.perf_counter()
        res = run_experiment(cfg, out)
        _RUNS[name] = (res, time.perf_counter() - t0)
    return _RUNS[name]


# --------------------------------------------------------------------------


def test_criterion_01_kappa_gaussian():
    t0 = time.perf_counter()
    errs = {k: abs(kappa_elliptical(1.0, k).kappa - 1.0) for k in (2, 3, 5)}
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-8 and dt < 1
    record(1, ok, f"max |kappa(beta=1) - 1| = {max(errs.values()):.2e} (tol 1e-8), {dt:.2f} s (< 1 s)")
    assert ok


def test_criterion_02_gamma_monte_carlo():
    gen = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for beta in (0.5, 2.0, 3.0):
        for k in (2, 5):
            r = random_spd(k, gen)
            model = SourceModel.mpe(beta, r / mpe_rho(beta, k))
            est = estimate_gamma_mc(model, 1_000_000, gen)
            target = kappa_elliptical(beta, k).kappa * np.linalg.inv(r)
            worst = max(worst, _rel(est.gamma, target))
    dt = time.perf_counter() - t0
    ok = worst < 0.05 and dt < 60
    record(2, ok, f"max relative Frobenius error of Gamma-hat vs kappa R^-1 = {worst:.4f} (< 0.05), "
                  f"{dt:.1f} s (< 60 s)")
    assert ok


def test_criterion_03_fim_validation():
    gen = np.random.default_rng(3)
    k, v, m = 3, 4, 100_000
    t0 = time.perf_counter()
    worst = {}
    for label, models in (
            ("gaussian", [SourceModel.gaussian(random_spd(k, gen)) for _ in range(2)]),
            ("mpe2", [SourceModel.mpe(2.0, random_spd(k, gen)) for _ in range(2)])):
        an = fim_for_models(models, v)
        em = empirical_fim(models, v, m, gen).blocks
        f_em, f_an = em.pair(0, 1), an.pair(0, 1)
        errs = [_rel(f_em, f_an), _rel(f_em[:k, k:], v * np.eye(k)), _rel(f_em[k:, :k], v * np.eye(k))]
        errs += [_rel(e, a) for e, a in zip(em.diag_blocks, an.diag_blocks)]
        # the assembled off-diagonal sub-blocks are V I exactly
        exact = np.array_equal(f_an[:k, k:], v * np.eye(k)) and np.array_equal(f_an[k:, :k], v * np.eye(k))
        worst[label] = (max(errs), exact)
    dt = time.perf_counter() - t0
    ok = all(e < 0.05 and x for e, x in worst.values()) and dt < 120
    detail = ", ".join(f"{lab} {e:.4f}" for lab, (e, _) in worst.items())
    record(3, ok, f"max relative Frobenius error empirical vs assembled: {detail} (< 0.05), "
                  f"V*I sub-blocks exact: {all(x for _, x in worst.values())}, {dt:.1f} s (< 120 s)")
    assert ok


def test_criterion_04_bound_paths():
    gen = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = int(gen.integers(1, 6))
        rm, rn = random_spd(k, gen), random_spd(k, gen)
        km, kn = 1 + gen.exponential(2), 1 + gen.exponential(2)
        v = int(gen.integers(10, 10_000))
        ell = isr_bound_elliptical(km, kn, rm, rn, v).value
        gen_path = isr_bound_general(km * np.linalg.inv(rm) * rn, kn * np.linalg.inv(rn) * rm, rm, rn, v).value
        worst = max(worst, abs(ell - gen_path) / gen_path)
        ica = isr_bound_ica_iid(km, kn, v).value
        ica_gen = isr_bound_general([[km]], [[kn]], [[1.0]], [[1.0]], v).value
        ica_ell = isr_bound_elliptical(km, kn, np.eye(1), np.eye(1), v).value
        worst = max(worst, abs(ica - ica_gen) / ica_gen, abs(ica - ica_ell) / ica_ell)
    violations = 0
    for _ in range(20):
        k = int(gen.integers(2, 6))
        grid_m = np.sort(np.r_[1.0, 1 + gen.exponential(3, 6)])
        grid_n = np.r_[1.0, 1 + gen.exponential(3, 3)]
        verdict = check_bound_monotonicity(random_spd(k, gen), random_spd(k, gen), grid_m, grid_n, 100)
        violations += len(verdict.above_gaussian) + len(verdict.increasing_in_kappa)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and violations == 0 and dt < 10
    record(4, ok, f"max relative path disagreement {worst:.2e} (<= 1e-10) over 100 configs, "
                  f"{violations} monotonicity violations, {dt:.2f} s (< 10 s)")
    assert ok


def _identifiability_configs(gen):
    """200 configurations cycling through identifiable and constructed nonidentifiable cases."""
    def d_matrix(k):
        return np.diag(gen.choice([-1.0, 1.0], k) * gen.uniform(0.4, 2.5, k))

    makers = []

    def gauss_random():
        k = int(gen.integers(2, 5))
        return [SourceModel.gaussian(random_spd(k, gen)) for _ in range(2)], 10

    def gauss_witness():
        k = int(gen.integers(2, 5))
        rn, d = random_spd(k, gen), d_matrix(k)
        return [SourceModel.gaussian(d @ rn @ d), SourceModel.gaussian(rn)], 10

    def gauss_block_witness():
        a, d = random_spd(2, gen), d_matrix(2)
        return [SourceModel.gaussian(block_diag(a, random_spd(2, gen))),
                SourceModel.gaussian(block_diag(d @ a @ d, random_spd(2, gen)))], 10

    def mpe_pair():
        k = int(gen.integers(2, 5))
        beta = float(gen.choice([0.5, 2.0, 3.0]))
        return [SourceModel.mpe(beta, random_spd(k, gen)), SourceModel.mpe(1.0, random_spd(k, gen))], 10

    def mpe_identity_three():
        beta = float(gen.choice([0.5, 1.0, 3.0]))
        return [SourceModel.mpe(beta, np.eye(3))] * 2 + [SourceModel.mpe(2.0, random_corr(3, gen))], 10

    def ma_scaled():
        taps = gen.standard_normal((3, 2, 2))
        return [SourceModel.vector_ma(taps), SourceModel.vector_ma(gen.uniform(0.5, 2) * taps)], 8

    def ma_random():
        return [SourceModel.vector_ma(gen.standard_normal((3, 2, 2))) for _ in range(2)], 8

    def ica_sample_covariance():
        v = 6
        t = toeplitz(gen.uniform(0.1, 0.8) ** np.arange(v))
        other = t * gen.uniform(0.5, 3) if gen.random() < 0.5 else toeplitz((-0.5) ** np.arange(v))
        return [SourceModel.gaussian([[other[0, 0]]], sample_covariance=other),
                SourceModel.gaussian([[1.0]], sample_covariance=t)], v

    makers = [gauss_random, gauss_witness, gauss_block_witness, mpe_pair, mpe_identity_three,
              ma_scaled, ma_random, ica_sample_covariance]
    return [makers[i % len(makers)]() for i in range(200)]


def test_criterion_05_identifiability_agreement():
    gen = np.random.default_rng(5)
    t0 = time.perf_counter()
    configs = _identifiability_configs(gen)
    agree = n_flagged = 0
    for models, v in configs:
        rep = verify_fim_singularity(models, v)
        agree += rep.agrees
        n_flagged += not rep.verdict.identifiable
    dt = time.perf_counter() - t0
    ok = agree == len(configs) and dt < 60
    record(5, ok, f"{agree}/{len(configs)} symbolic verdicts match FIM singularity "
                  f"({n_flagged} nonidentifiable), {dt:.1f} s (< 60 s)")
    assert ok


def test_criterion_06_mpe_correlated(tmp_path_factory):
    res, dt = _experiment("mpe_correlated.ini", tmp_path_factory)
    curve = res.curve
    at = {(c["v_samples"], c["beta"]): c for c in curve}
    gaps = {b: _db(at[(10000, b)]["isr"] / at[(10000, b)]["bound"]) for b in (2.0, 3.0, 4.0, 6.0)}
    peaks = {v: max((c for c in curve if c["v_samples"] == v), key=lambda c: c["isr"])["beta"]
             for v in sorted({c["v_samples"] for c in curve})}
    success = at[(100, 6.0)]["success_rate"]
    ok_i = all(abs(g) <= 3 for g in gaps.values())
    ok_ii = all(b == 1.0 for b in peaks.values())
    ok_iii = success >= 0.95
    ok = ok_i and ok_ii and ok_iii and dt < 1800
    record(6, ok, "(i) ISR/bound at V=1e4: " + ", ".join(f"beta={b:g} {g:+.2f} dB" for b, g in gaps.items())
           + f" (|.| <= 3 dB); (ii) peak beta per V {peaks}; (iii) success V=100 beta=6 {success:.3f} (>= 0.95); "
           f"{dt:.0f} s (< 1800 s)")
    assert ok


def test_criterion_07_mpe_identity(tmp_path_factory):
    res, dt = _experiment("mpe_identity.ini", tmp_path_factory)
    assert res.config.aggregation is Aggregation.MEDIAN_ALL
    at = {(c["v_samples"], c["beta"]): c for c in res.curve}
    flags = all((not c["bound_finite"]) == (c["beta"] == 1.0) for c in res.curve)
    infinite = all(math.isinf(c["bound"]) for c in res.curve if c["beta"] == 1.0)
    gaps = {b: _db(at[(10000, b)]["isr"] / at[(10000, b)]["bound"]) for b in (0.5, 3.0)}
    ok = flags and infinite and all(abs(g) <= 3 for g in gaps.values()) and dt < 1800
    record(7, ok, f"bound +inf exactly at beta=1: {flags and infinite}; median ISR/bound at V=1e4: "
           + ", ".join(f"beta={b:g} {g:+.2f} dB" for b, g in gaps.items()) + f" (|.| <= 3 dB); {dt:.0f} s (< 1800 s)")
    assert ok


def test_criterion_08_jdiag_lags(tmp_path_factory):
    res, dt = _experiment("jdiag_lags.ini", tmp_path_factory)
    c = {row["lags"]: row for row in res.curve}
    # sigma is the Monte-Carlo standard error of each averaged point
    steps = [(l, c[l]["isr"] - c[l + 1]["isr"], 2 * max(c[l]["isr_stderr"], c[l + 1]["isr_stderr"]))
             for l in (1, 2, 3)]
    decreasing = all(d > s for _, d, s in steps)
    flat = [(l, abs(c[l]["isr"] - c[5]["isr"]), 2 * max(c[l]["isr_stderr"], c[5]["isr_stderr"]))
            for l in range(6, 11)]
    is_flat = all(d <= s for _, d, s in flat)
    above = all(row["isr"] >= row["bound"] for row in res.curve)
    ok = decreasing and is_flat and above and dt < 900
    record(8, ok, "decrease steps " + ", ".join(f"{l}->{l + 1}: {d:.2f} > {s:.2f}" for l, d, s in steps)
           + f"; lags 5-10 max drift {max(d for _, d, _ in flat):.2f} vs 2 sigma {min(s for _, _, s in flat):.2f}"
           f"; ISR >= bound at every lag: {above}; {dt:.0f} s (< 900 s)")
    assert ok


def test_criterion_09_no_bound_violations(tmp_path_factory):
    checked, worst, bad = 0, math.inf, []
    for name in ("mpe_correlated.ini", "mpe_identity.ini", "jdiag_lags.ini"):
        res, _ = _experiment(name, tmp_path_factory)
        label = "lags" if "lags" in res.curve[0] else "beta"
        for c in res.curve:
            if not c["bound_finite"]:
                continue
            rows = [t for t in res.trials if t["v_samples"] == c["v_samples"] and t[label] == c[label]]
            # trial average: mean over successful trials, whatever the curve aggregation is
            mean, se = aggregate([t["isr_total"] for t in rows], [t["success"] for t in rows],
                                 Aggregation.MEAN_SUCCESSFUL)
            z = (mean - c["bound"]) / se
            checked += 1
            worst = min(worst, z)
            if not mean >= c["bound"] - 2 * se:
                bad.append(f"{name} V={c['v_samples']} {label}={c[label]}: {mean:.3f} < {c['bound']:.3f} - 2*{se:.3f}")
    ok = not bad
    record(9, ok, f"{checked} identifiable grid points, lowest (mean - bound)/sigma = {worst:+.2f} (>= -2)"
           + ("" if ok else "; violations: " + "; ".join(bad)))
    assert ok


def test_criterion_10_determinism(tmp_path):
    identical = []
    for p in sorted(CONFIGS.glob("*.ini")):
        cfg = with_overrides(load_config(p), trials=2)
        a = run_experiment(cfg, tmp_path / p.stem / "a")
        b = run_experiment(cfg, tmp_path / p.stem / "b", threads=2)
        for name in ("trials.csv", "curve.csv", "isr.svg"):
            identical.append(((tmp_path / p.stem / "a" / name).read_bytes()
                              == (tmp_path / p.stem / "b" / name).read_bytes()))
        assert a.trials_csv == b.trials_csv
    full = "jdiag_lags.ini"
    if full in _RUNS:
        again = run_experiment(load_config(CONFIGS / full), write=False)
        identical.append(again.trials_csv == _RUNS[full][0].trials_csv)
        identical.append(again.curve_csv == _RUNS[full][0].curve_csv)
    ok = all(identical)
    scope = "every shipped config at 2 trials, serial vs 2 workers"
    if full in _RUNS:
        scope += ", plus a full-size rerun of jdiag_lags.ini"
    record(10, ok, f"{sum(identical)}/{len(identical)} rerun outputs byte-identical ({scope})")
    assert ok
