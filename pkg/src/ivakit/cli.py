"""Command line entry point: ``ivakit <subcommand> ...``."""

from __future__ import annotations

import argparse
import configparser
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import bound_report
from .core import RngHandle, SourceModel
from .harness import ConfigError, load_config, run_experiment, with_overrides
from .ident import check_iva_identifiability_general, check_iva_identifiability_iid


# --------------------------------------------------------------------------
# model files


_SOURCE_KEYS = {"family", "beta", "covariance", "taps"}


def _section_lines(text: str) -> dict:
    """``{(section, key): line}`` plus ``{(section, None): header line}``."""
    out = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            section = head.group(1).strip()
            out.setdefault((section, None), i)
            continue
        m = re.match(r"\s*([A-Za-z_][\w.]*)\s*[=:]", line)
        if m and section is not None:
            out.setdefault((section, m.group(1)), i)
    return out


def parse_models(text: str, source: str = "<models>"):
    """Read a model file.

    Format::

        [models]
        k_datasets = 2
        v_samples = 1000

        [source.0]
        family = gaussian          # gaussian | mpe | vector_ma
        covariance = identity      # or a JSON matrix

        [source.1]
        family = mpe
        beta = 3
        covariance = [[1, 0.5], [0.5, 1]]   # MPE: the covariance; dispersion = covariance / rho
        # vector_ma uses: taps = [[[...]], ...]   (L x K x K JSON)

    Returns ``(models, v_samples)``.
    """
    lines = _section_lines(text)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}:{getattr(exc, 'lineno', 1)}: {exc}") from None

    def fail(section, key, msg):
        line = lines.get((section, key), lines.get((section, None), 1))
        raise ConfigError(f"{source}:{line}: {key or '[' + section + ']'}: {msg}")

    if "models" not in parser:
        raise ConfigError(f"{source}:1: missing [models] section")
    head = parser["models"]
    values = {}
    for key in ("k_datasets", "v_samples"):
        try:
            values[key] = int(head.get(key, {"k_datasets": "0", "v_samples": "1000"}[key]))
        except ValueError:
            fail("models", key, f"cannot parse {head.get(key)!r}")
    k, v = values["k_datasets"], values["v_samples"]
    names = sorted((s for s in parser.sections() if s.startswith("source.")),
                   key=lambda s: int(s.split(".", 1)[1]) if s.split(".", 1)[1].isdigit() else -1)
    if len(names) < 2:
        raise ConfigError(f"{source}:1: need at least two [source.N] sections")
    models = []
    for name in names:
        if not name.split(".", 1)[1].isdigit():
            fail(name, None, "section names must be source.<integer>")
        sec = parser[name]
        for key in sec:
            if key not in _SOURCE_KEYS:
                fail(name, key, "unknown key")
        fam = sec.get("family", "").strip()

        def matrix(key):
            raw = sec.get(key, "").strip()
            if not raw:
                fail(name, key, "missing")
            if raw == "identity":
                if k < 1:
                    fail("models", "k_datasets", "needed for 'identity'")
                return np.eye(k)
            try:
                return np.array(json.loads(raw), dtype=float)
            except (json.JSONDecodeError, ValueError):
                fail(name, key, f"cannot parse {raw!r}")

        try:
            if fam == "gaussian":
                models.append(SourceModel.gaussian(matrix("covariance")))
            elif fam == "mpe":
                from .score import mpe_rho
                try:
                    beta = float(sec.get("beta", "nan"))
                except ValueError:
                    fail(name, "beta", f"cannot parse {sec.get('beta')!r}")
                cov = matrix("covariance")
                models.append(SourceModel.mpe(beta, cov / mpe_rho(beta, cov.shape[0])))
            elif fam == "vector_ma":
                models.append(SourceModel.vector_ma(matrix("taps")))
            else:
                fail(name, "family", f"unknown family {fam!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            fail(name, None, str(exc))
    return models, v


def load_models(path):
    p = Path(path)
    return parse_models(p.read_text(), str(p))


# --------------------------------------------------------------------------
# subcommands


def _cmd_gen(args):
    from .harness import ExperimentConfig, make_setup, source_models
    from .sources import MixingSpec, mix, sample_scv, save_ensemble

    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig.preset(args.kind, betas=(args.beta,), v_samples=(args.v_samples,),
                                      n_sources=args.n_sources, k_datasets=args.k_datasets,
                                      covariance=args.covariance)
    cfg = with_overrides(cfg, seed=args.seed)
    setup = make_setup(cfg)
    point = cfg.grid()[0]
    models = source_models(cfg, setup, point)
    gen = RngHandle(cfg.seed, 1).spawn(0).generator()
    ens = mix([sample_scv(m, point["v_samples"], gen) for m in models],
              MixingSpec(cfg.n_sources, cfg.k_datasets), gen)
    out = Path(args.out or "ensemble")
    save_ensemble(ens, out, {"kind": cfg.kind.value, "seed": cfg.seed, **point,
                             "family": models[0].family.value})
    print(f"wrote ensemble K={ens.k_datasets} N={ens.n_sources} V={ens.v_samples} to {out}")
    return 0


def _cmd_fit(args):
    from .algos import FitOptions, fit_iva_mpe, fit_jdiag_sos
    from .metrics import evaluate_trial
    from .sources import load_ensemble

    ens, meta = load_ensemble(args.data)
    if args.algo == "jdiag":
        res = fit_jdiag_sos(ens, args.lags)
    else:
        cands = tuple(float(b) for b in args.beta.split(","))
        res = fit_iva_mpe(ens, FitOptions(beta_candidates=cands, restarts=args.restarts),
                          RngHandle(args.seed or 0, 2).generator())
    out = Path(args.out or "fit")
    out.mkdir(parents=True, exist_ok=True)
    w = res.demixing.matrices
    with open(out / "demixing.csv", "w") as fh:
        fh.write("dataset,row," + ",".join(f"w{j}" for j in range(w.shape[2])) + "\n")
        for k in range(w.shape[0]):
            for i in range(w.shape[1]):
                fh.write(f"{k},{i}," + ",".join(repr(float(x)) for x in w[k, i]) + "\n")
    info = {"algo": args.algo, "converged": res.converged, "iterations": res.iterations,
            "beta": res.beta, "final_objective": res.objective_trace[-1]}
    if ens.mixing is not None:
        o = evaluate_trial(res.demixing, ens.mixing, ens.v_samples)
        info.update(success=o.success, isr_total_normalized=o.isr_total_normalized)
    (out / "fit.json").write_text(json.dumps(info, indent=2) + "\n")
    print(json.dumps(info))
    return 0


def _cmd_bound(args):
    if args.models:
        models, v = load_models(args.models)
        rep = bound_report(models, v)
        if not rep.all_finite:
            print("+inf (nonidentifiable)")
        else:
            print(f"total normalized ISR bound: {rep.total_normalized:.6g}")
        print(rep.to_csv(), end="")
        return 0
    if not args.config:
        print("bound needs --models or --config", file=sys.stderr)
        return 2
    from .harness import compute_bounds, make_setup
    cfg = load_config(args.config)
    for key, b in compute_bounds(cfg, make_setup(cfg)).items():
        point = ", ".join(f"{k}={v}" for k, v in key)
        text = f"{b['bound']:.6g}" if b["bound_finite"] else "+inf (nonidentifiable)"
        print(f"{point}: {text}")
    return 0


def _cmd_ident(args):
    models, v = load_models(args.models)
    if all(m.iid for m in models):
        verdict = check_iva_identifiability_iid(models)
    else:
        verdict = check_iva_identifiability_general(models, v)
    print(verdict.to_json())
    return 0


def _cmd_experiment(args):
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, trials=args.trials, output=args.out)
    res = run_experiment(cfg, threads=args.threads)
    print(res.curve_csv, end="")
    print(f"wrote {', '.join(str(p) for p in res.paths.values())}")
    return 0


def _cmd_selftest(args):
    from .selftest import run_selftest
    return 0 if run_selftest(seed=args.seed or 0) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivakit", description="Joint blind source separation toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="{gen,fit,bound,ident,experiment,selftest}")

    g = sub.add_parser("gen", help="write a synthetic ensemble")
    g.add_argument("--config", help="experiment config; its first grid point is used")
    g.add_argument("--kind", default="mpe_correlated",
                   choices=["mpe_correlated", "mpe_identity", "jdiag_lags"])
    g.add_argument("--beta", type=float, default=2.0)
    g.add_argument("--n-sources", type=int, default=3)
    g.add_argument("--k-datasets", type=int, default=5)
    g.add_argument("--v-samples", type=int, default=1000)
    g.add_argument("--covariance", choices=["random", "identity"], default="random")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=_cmd_gen)

    f = sub.add_parser("fit", help="separate an ensemble written by gen")
    f.add_argument("--data", required=True)
    f.add_argument("--algo", choices=["iva-mpe", "jdiag"], default="iva-mpe")
    f.add_argument("--beta", default="2", help="shape parameter, or comma-separated candidates")
    f.add_argument("--lags", type=int, default=4)
    f.add_argument("--restarts", type=int, default=1)
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.set_defaults(func=_cmd_fit)

    b = sub.add_parser("bound", help="print the ISR bound for a model file or experiment config")
    b.add_argument("--models")
    b.add_argument("--config")
    b.set_defaults(func=_cmd_bound)

    i = sub.add_parser("ident", help="print the identifiability verdict of a model file")
    i.add_argument("--models", required=True)
    i.set_defaults(func=_cmd_ident)

    e = sub.add_parser("experiment", help="run a Monte-Carlo experiment")
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--trials", type=int)
    e.add_argument("--out")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=_cmd_experiment)

    s = sub.add_parser("selftest", help="check closed forms against independent oracles")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
