"""Fast cross-checks of closed forms against independent computations.

Each check prints one ``PASS``/``FAIL`` line.  The whole run takes a few
seconds and is exposed as ``ivakit selftest``.
"""

from __future__ import annotations

import itertools

import numpy as np

from .bounds import isr_bound_elliptical, isr_bound_general, isr_bound_ica_iid
from .core import SourceModel
from .fim import fim_for_models, empirical_fim
from .ident import diag_similar
from .score import kappa_closed_form, kappa_elliptical, mpe_score


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


def _spd(k, gen):
    b = gen.standard_normal((k, k))
    return b @ b.T + 0.5 * np.eye(k)


def check_kappa():
    worst = max(abs(kappa_elliptical(b, k).kappa - kappa_closed_form(b, k)) / kappa_closed_form(b, k)
                for b in (0.5, 1, 2, 3, 6) for k in (2, 3, 5))
    return worst < 1e-10, f"max relative error vs gamma-function form {worst:.2e}"


def check_score(gen):
    k, beta = 5, 3.0
    sigma = _spd(k, gen)
    y = gen.standard_normal((k, 1))
    phi = mpe_score(y, beta, sigma).phi[:, 0]
    s_inv = np.linalg.inv(sigma)
    f = lambda z: 0.5 * float(z @ s_inv @ z) ** beta  # noqa: E731
    h = 1e-6
    fd = np.array([(f(y[:, 0] + h * e) - f(y[:, 0] - h * e)) / (2 * h) for e in np.eye(k)])
    err = _rel(phi, fd)
    return err < 1e-6, f"MPE score vs central differences {err:.2e}"


def check_fim(gen):
    models = [SourceModel.mpe(2.0, _spd(3, gen)), SourceModel.gaussian(_spd(3, gen))]
    an = fim_for_models(models, 3)
    em = empirical_fim(models, 3, 50_000, gen).blocks
    err = max(_rel(em.pair_blocks[(0, 1)], an.pair_blocks[(0, 1)]),
              max(_rel(e, a) for e, a in zip(em.diag_blocks, an.diag_blocks)))
    return err < 0.05, f"Monte-Carlo FIM vs assembled blocks {err:.3f}"


def check_bound_paths(gen):
    worst = 0.0
    for _ in range(20):
        k = int(gen.integers(2, 6))
        rm, rn = _spd(k, gen), _spd(k, gen)
        km, kn = 1 + gen.exponential(), 1 + gen.exponential()
        ell = isr_bound_elliptical(km, kn, rm, rn, 100).value
        gen_ = isr_bound_general(km * np.linalg.inv(rm) * rn, kn * np.linalg.inv(rn) * rm, rm, rn, 100).value
        worst = max(worst, abs(ell - gen_) / ell)
        ica = isr_bound_ica_iid(km, kn, 100).value
        via = isr_bound_general([[km]], [[kn]], [[1.0]], [[1.0]], 100).value
        worst = max(worst, abs(ica - via) / ica)
    return worst < 1e-10, f"elliptical/ICA vs general path {worst:.2e}"


def check_diag_similar(gen):
    mismatches = 0
    for _ in range(30):
        k = 3
        rn = _spd(k, gen)
        if gen.random() < 0.5:
            d = np.diag(gen.choice([-1, 1], k) * gen.uniform(0.5, 2, k))
            rm = d @ rn @ d
        else:
            rm = _spd(k, gen)
        found = diag_similar(rm, rn) is not None
        mag = np.sqrt(np.diag(rm) / np.diag(rn))
        brute = any(np.allclose(np.diag(mag * s) @ rn @ np.diag(mag * s), rm, atol=1e-8)
                    for s in itertools.product([1.0], *[[1.0, -1.0]] * (k - 1)))
        mismatches += found != brute
    return mismatches == 0, f"{mismatches} disagreements with exhaustive sign search"


def run_selftest(seed: int = 0) -> bool:
    gen = np.random.default_rng(seed)
    checks = [("kappa quadrature", check_kappa), ("score gradient", lambda: check_score(gen)),
              ("FIM assembly", lambda: check_fim(gen)), ("bound paths", lambda: check_bound_paths(gen)),
              ("diagonal similarity", lambda: check_diag_similar(gen))]
    ok_all = True
    for name, fn in checks:
        ok, msg = fn()
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {msg}")
    return ok_all
