"""Command line interface.

``balred run <config>``       run a sweep, write CSV (and SVG plots)
``balred gramians <config>``  print Hankel spectra for one end time
``balred fourdvar <config>``  compare full and reduced 4D-Var increments

``<config>`` is an INI file or a preset name (heat, advection_diffusion,
noncompatible).  Exit codes: 0 success, 1 configuration error, 2 numerical
failure.  The number of worker threads is read from ``BALRED_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import fourdvar, harness, linalg, models, reduction
from .errors import BalredError, ConfigError, FormatError, NumericalError

log = logging.getLogger("balred")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

_FLAG_KEYS = ("model", "d", "methods", "prior", "prior_seed", "end_times", "step",
              "ranks", "sigma_obs", "n_trials", "seed")


def _add_config_flags(p):
    p.add_argument("config", help="INI file or preset name")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--large", action="store_true", help="allow model sizes above 1000")
    for key in _FLAG_KEYS:
        if key == "seed":
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE",
                       help=f"override config key {key}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _overrides(args):
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if args.large:
        out["large"] = "true"
    return out


def _config(args):
    return harness.load_config(args.config, _overrides(args))


def cmd_run(args):
    config = _config(args)
    out = Path(args.out or config.out or f"balred-{config.name}")
    report = harness.run_experiment(config, out)
    if not args.no_plots and report.rows:
        from .plotting import emit_svg_plots

        emit_svg_plots(report, out)
    for model, abscissa in report.spectral_abscissa.items():
        print(f"{model}: spectral abscissa {abscissa!r}")
    print(f"{len(report.rows)} rows written to {out / 'results.csv'}")
    if report.warnings:
        print(f"{len(report.warnings)} warnings (see log)")
    if report.optimality_violations:
        for v in report.optimality_violations:
            print(f"optimality violated: {v}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_gramians(args):
    config = _config(args)
    config = harness.config_from_mapping(
        {**_as_mapping(config), "end_times": repr(args.te)}, config.name)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["model", "method", "index", "hankel", "normalized"])
    for d in config.sizes:
        system = harness.build_system(config, d)
        label = harness.model_label(config, system.d)
        harness._check_stability(config, system, label)
        prior = harness.build_prior(config, system)
        noise = harness.build_noise(config, system)
        setup = models.InferenceSetup(system, prior, noise, models.uniform_times(config.step, args.te))
        from .inference import forward_map

        fmap = forward_map(setup)
        for method in config.methods:
            if method == "OLR":
                continue
            pair = harness._gramian_pair(method, setup, fmap)
            values = reduction.hankel_values(pair.reach_factor, pair.obs_factor)
            for i, v in enumerate(values, start=1):
                w.writerow([label, method, i, repr(float(v)), repr(float(v / values[0]))])
    return EXIT_OK


def _as_mapping(config):
    out = {}
    for key in harness._KEYS:
        value = getattr(config, key)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        out[key] = str(value)
    return out


def cmd_fourdvar(args):
    config = _config(args)
    d = config.sizes[0]
    cont = harness.build_system(config, d)
    prior = harness.build_prior(config, cont)
    noise = harness.build_noise(config, cont)
    A = linalg.expm(cont.A, config.step)
    model = models.LtiSystem(A, cont.C, time_kind=models.DISCRETE)
    rng = models.make_rng(config.seed, 4)
    truth = prior.base @ models.standard_normal(rng, d)
    background = prior.base @ models.standard_normal(rng, d)
    obs, x = [], truth.copy()
    L = np.linalg.cholesky(noise)
    for _ in range(args.steps + 1):
        obs.append(model.C @ x + L @ models.standard_normal(rng, model.d_out))
        x = A @ x
    problem = fourdvar.FourDVarProblem(model, background, prior, noise, np.array(obs))
    full = fourdvar.outer_loop(problem)
    dx = fourdvar.inner_loop_solve(problem, background)
    pair = fourdvar.fourdvar_gramians(problem)
    print(f"full: iterations {full.iterations}, cost {full.cost_trace[0]!r} -> {full.cost_trace[-1]!r}")
    print("rank,relative_increment_error,reduced_cost")
    for r in config.ranks:
        try:
            red = reduction.square_root_bt(model, pair, prior, r)
        except NumericalError as exc:
            print(f"{r},nan,nan  # {exc}")
            continue
        dxr = fourdvar.reduced_inner_loop(problem, red, background)
        err = float(np.linalg.norm(dxr - dx) / np.linalg.norm(dx))
        print(f"{r},{err!r},{fourdvar.cost(problem, background + dxr)!r}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="balred", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment sweep")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip the SVG figures")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("gramians", help="print Hankel spectra")
    _add_config_flags(p)
    p.add_argument("--te", type=float, required=True, help="end time")
    p.set_defaults(func=cmd_gramians)
    p = sub.add_parser("fourdvar", help="reduced inner-loop demonstration")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, default=50, help="index n of the last observation")
    p.set_defaults(func=cmd_fourdvar)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BalredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
