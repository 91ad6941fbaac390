"""Experiment sweeps: methods x end times x ranks, with CSV output.

A configuration is a flat INI section (or the name of a built-in preset).
For every model size and end time the harness builds the inference setup,
caches the full posterior and the Gramian pairs, and evaluates every
(method, rank) combination against the full posterior.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gramians as gr
from . import inference, metrics, models, reduction
from .errors import ConfigError, RankError, UnstableModelError

log = logging.getLogger(__name__)

METHODS = ("BT", "TLBT", "BT-H", "OLR")
MODELS = ("heat", "advection_diffusion", "external")
PRIORS = ("lyapunov", "band", "identity", "file")
LARGE_D = 1000
WORKERS_ENV = "BALRED_WORKERS"
CSV_HEADER = ["model", "method", "t_e", "rank", "foerstner", "exact_risk",
              "empirical_risk", "emp_stderr", "seed"]
OPTIMALITY_SLACK = 1e-10
SOFT_AGREEMENT = 0.10

PRESETS = {
    "heat": {
        "model": "heat", "d": "200", "methods": "BT, TLBT, OLR", "prior": "lyapunov",
        "end_times": "1, 3, 10", "step": "0.005", "ranks": "1-20",
        "sigma_obs": "0.008", "n_trials": "100", "seed": "0",
    },
    "advection_diffusion": {
        "model": "advection_diffusion", "d": "200, 1200", "diffusion": "0.02",
        "velocity": "0.01", "methods": "TLBT, BT-H, OLR", "prior": "identity",
        "end_times": "0.1, 0.5, 1", "step": "0.001", "ranks": "1-50",
        "sigma_obs": "0.008", "n_trials": "100", "seed": "0",
    },
    "noncompatible": {
        "model": "heat", "d": "200", "methods": "BT, OLR", "prior": "band",
        "prior_seed": "0", "compatible": "true", "end_times": "10", "step": "0.005",
        "ranks": "1-20", "sigma_obs": "0.008", "n_trials": "100", "seed": "0",
    },
}


# Configuration ---------------------------------------------------------------

def _floats(text, key):
    try:
        return [float(v) for v in _split(text)]
    except ValueError:
        raise ConfigError(f"{key}: expected a list of numbers, got {text!r}") from None


def _split(text):
    return [v.strip() for v in str(text).replace(";", ",").split(",") if v.strip()]


def _ints(text, key):
    out = []
    for item in _split(text):
        try:
            if "-" in item[1:]:
                lo, hi = item.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(item))
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {item!r} as an integer or range") from None
    return out


def _bool(text, key):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep.  ``d`` may list several sizes; sizes above 1000 need ``large``."""

    name: str = "experiment"
    model: str = "heat"
    d: tuple = (200,)
    diffusion: float = 0.02
    velocity: float = 0.01
    a_file: str | None = None
    c_file: str | None = None
    b_file: str | None = None
    methods: tuple = ("BT", "TLBT", "OLR")
    prior: str = "lyapunov"
    prior_seed: int = 0
    prior_file: str | None = None
    compatible: bool = False
    end_times: tuple = (1.0,)
    step: float = 0.005
    ranks: tuple = tuple(range(1, 21))
    sigma_obs: float | None = 0.008
    noise_file: str | None = None
    n_trials: int = 100
    seed: int = 0
    out: str | None = None
    large: bool = False

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.model == "external" and not (self.a_file and self.c_file):
            raise ConfigError("external model needs a_file and c_file")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {bad}")
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.prior == "file" and not self.prior_file:
            raise ConfigError("prior = file needs prior_file")
        if self.step <= 0:
            raise ConfigError("step must be positive")
        if not self.end_times:
            raise ConfigError("end_times is empty")
        for te in self.end_times:
            try:
                models.uniform_times(self.step, te)
            except ConfigError as exc:
                raise ConfigError(f"end_times: {exc}") from None
        if not self.ranks or min(self.ranks) < 1:
            raise ConfigError("ranks must be positive integers")
        if (self.sigma_obs is None) == (self.noise_file is None):
            raise ConfigError("give exactly one of sigma_obs and noise_file")
        if self.sigma_obs is not None and self.sigma_obs <= 0:
            raise ConfigError("sigma_obs must be positive")
        if self.n_trials < 0 or self.seed < 0:
            raise ConfigError("n_trials and seed must be non-negative")
        return self

    @property
    def sizes(self):
        """Model sizes to run; large ones only with ``large``."""
        keep = [d for d in self.d if d <= LARGE_D or self.large]
        for d in self.d:
            if d not in keep:
                log.warning("skipping d = %d (needs --large)", d)
        return keep


_KEYS = {
    "model": str, "d": lambda v, k: tuple(_ints(v, k)),
    "diffusion": float, "velocity": float, "a_file": str, "c_file": str, "b_file": str,
    "methods": lambda v, k: tuple(m.upper() for m in _split(v)),
    "prior": str, "prior_seed": int, "prior_file": str,
    "compatible": _bool, "end_times": lambda v, k: tuple(_floats(v, k)),
    "step": float, "ranks": lambda v, k: tuple(_ints(v, k)),
    "sigma_obs": float, "noise_file": str, "n_trials": int, "seed": int, "out": str,
    "large": _bool,
}


def _convert(key, value):
    if key not in _KEYS:
        raise ConfigError(f"unknown configuration key {key!r}")
    conv = _KEYS[key]
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    try:
        if conv in (str, float, int):
            return conv(value.strip() if isinstance(value, str) else value)
        return conv(value, key)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def config_from_mapping(values, name="experiment"):
    kwargs = {"name": name}
    for key, value in values.items():
        kwargs[key] = _convert(key.strip().lower(), value)
    # a noise file replaces the default sigma_obs
    if kwargs.get("noise_file") and "sigma_obs" not in values:
        kwargs["sigma_obs"] = None
    return ExperimentConfig(**kwargs).validate()


def load_config(source, overrides=None):
    """Config from a preset name or an INI file, then apply `overrides`.

    The INI file holds one section (any name); its keys are those of
    :class:`ExperimentConfig`.  A ``preset`` key starts from a built-in preset.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    source = str(source)
    if source in PRESETS:
        values, name = dict(PRESETS[source]), source
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(
                f"{source!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        sections = parser.sections()
        if len(sections) != 1:
            raise ConfigError(f"{path}: expected exactly one section, found {len(sections)}")
        values = dict(parser[sections[0]])
        name = sections[0]
        preset = values.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            values = {**PRESETS[preset], **values}
    values.update({k: str(v) if not isinstance(v, str) else v for k, v in overrides.items()})
    return config_from_mapping(values, name)


# Problem construction --------------------------------------------------------

def build_system(config, d):
    if config.model == "heat":
        return models.build_heat_1d(d)
    if config.model == "advection_diffusion":
        return models.build_advection_diffusion(d, config.diffusion, config.velocity)
    return models.load_lti_matrix_market(config.a_file, config.c_file, config.b_file)


def build_prior(config, system):
    d = system.d
    if config.prior == "identity":
        return models.identity_prior(d)
    if config.prior == "band":
        return models.build_band_prior(d, config.prior_seed)
    if config.prior == "file":
        from .linalg import cholesky_psd

        return cholesky_psd(models.read_matrix_market(config.prior_file))
    B = system.B if system.B is not None else np.eye(d)
    return models.prior_from_lyapunov(system, B)


def build_noise(config, system):
    if config.noise_file:
        return models.read_matrix_market(config.noise_file)
    return config.sigma_obs**2 * np.eye(system.d_out)


def model_label(config, d):
    return f"{config.model}_d{d}"


# Report ----------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentRow:
    model: str
    method: str
    t_e: float
    rank: int
    foerstner: float
    exact_risk: float
    empirical_risk: float
    emp_stderr: float
    seed: int
    excess_risk: float = math.nan
    runtime: float = 0.0

    def csv_fields(self):
        return [self.model, self.method, _fmt(self.t_e), str(self.rank), _fmt(self.foerstner),
                _fmt(self.exact_risk), _fmt(self.empirical_risk), _fmt(self.emp_stderr),
                str(self.seed)]


@dataclass
class ExperimentReport:
    config: ExperimentConfig | None = None
    rows: list = field(default_factory=list)
    hankel: dict = field(default_factory=dict)
    spectral_abscissa: dict = field(default_factory=dict)
    dimensions: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    optimality_violations: list = field(default_factory=list)

    @property
    def models(self):
        seen = []
        for row in self.rows:
            if row.model not in seen:
                seen.append(row.model)
        return seen


def _fmt(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _te_label(te):
    return f"{float(te):g}"


def emit_csv(report, path):
    """Write the rows to `path` and one Hankel file per (model, t_e) beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in report.rows:
            w.writerow(row.csv_fields())
    written = [path]
    groups = {}
    for (model, method, te), values in report.hankel.items():
        groups.setdefault((model, te), []).append((method, values))
    for (model, te), spectra in groups.items():
        hp = path.parent / f"hankel_{model}_{_te_label(te)}.csv"
        with hp.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "index", "hankel", "normalized"])
            for method, values in spectra:
                for i, v in enumerate(values, start=1):
                    w.writerow([method, i, _fmt(v), _fmt(v / values[0])])
        written.append(hp)
    return written


# Running ---------------------------------------------------------------------

@dataclass(frozen=True)
class _Variant:
    """A method evaluated with a given approximation prior and reference."""

    label: str
    method: str
    approx: str
    reference: str


def _variants(config):
    if not config.compatible:
        return [_Variant(m, m, "given", "given") for m in config.methods]
    out = []
    for m in config.methods:
        pairs = [("NC", "NC"), ("C", "C")] if m == "OLR" else [("C", "NC"), ("C", "C"), ("NC", "NC")]
        out.extend(_Variant(f"{m} {a}-{r}", m, a, r) for a, r in pairs)
    return out


def _check_stability(config, system, label):
    if "BT" in config.methods and not models.is_stable(system):
        raise UnstableModelError(
            f"{label}: BT with infinite Gramians needs a stable model (spectral abscissa "
            f"{models.spectral_abscissa(system.A):.6g}); use TLBT or BT-H")
    if config.compatible and not models.is_stable(system):
        raise UnstableModelError(f"{label}: a compatible prior needs a stable model")


def _worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _gramian_pair(method, setup, fmap):
    if method == "TLBT":
        return gr.lg_gramians(setup, gr.TIME_LIMITED)
    if method == "BT":
        return gr.lg_gramians(setup, gr.INFINITE)
    return inference.bth_gramians(setup, fmap)


def _evaluate(approx, setup, ref, n_trials, seed):
    f = metrics.posterior_foerstner(approx, ref.post)
    excess = metrics.excess_risk(approx, setup, ref)
    if n_trials >= 2:
        emp = metrics.empirical_bayes_risk(approx, setup, n_trials, seed, ref)
        emp_v, emp_se = emp.value, emp.std_error
    else:
        emp_v = emp_se = math.nan
    return f, setup.system.d + excess, emp_v, emp_se, excess


class _Case:
    """Everything cached for one (model size, t_e)."""

    def __init__(self, config, system, priors, noise, te):
        times = models.uniform_times(config.step, te)
        self.setups = {k: models.InferenceSetup(system, S, noise, times) for k, S in priors.items()}
        # the forward map does not depend on the prior
        self.fmap = inference.forward_map(next(iter(self.setups.values())))
        self.refs = {k: metrics.FullReference(s, self.fmap) for k, s in self.setups.items()}
        self.gramians = {}
        self.spectra = {}

    def gramian_pair(self, method, prior):
        key = (method, prior)
        if key not in self.gramians:
            self.gramians[key] = _gramian_pair(method, self.setups[prior], self.refs[prior].fmap)
        return self.gramians[key]

    def olr_spectrum(self, prior):
        if prior not in self.spectra:
            self.spectra[prior] = inference.olr_spectrum(self.setups[prior], self.refs[prior].fmap)
        return self.spectra[prior]


def _row_job(config, case, model, variant, te, r):
    t0 = time.perf_counter()
    setup = case.setups[variant.approx]
    ref_setup = case.setups[variant.reference]
    ref = case.refs[variant.reference]
    try:
        if variant.method == "OLR":
            approx = inference.olr_posterior_operator(
                setup, r, case.olr_spectrum(variant.approx), variant.label)
        else:
            pair = case.gramian_pair(variant.method, variant.approx)
            red = reduction.square_root_bt(setup.system, pair, setup.prior_factor, r)
            approx = inference.reduced_posterior_operator(setup, red, variant.label)
        f, risk, emp, se, excess = _evaluate(approx, ref_setup, ref, config.n_trials, config.seed)
        note = None
    except RankError as exc:
        f = risk = emp = se = excess = math.nan
        note = f"{model} {variant.label} t_e={_te_label(te)} r={r}: {exc}; row left as NaN"
    row = ExperimentRow(model, variant.label, float(te), int(r), f, risk, emp, se,
                        config.seed, excess, time.perf_counter() - t0)
    return row, note


def _check_optimality(rows):
    """OLR must not lose to any BT variant sharing rank, t_e and prior scenario."""
    violations = []
    olr = {}
    for row in rows:
        method, _, scenario = row.method.partition(" ")
        if method == "OLR":
            olr[(row.model, row.t_e, row.rank, scenario)] = row
    for row in rows:
        method, _, scenario = row.method.partition(" ")
        if method == "OLR":
            continue
        o = olr.get((row.model, row.t_e, row.rank, scenario))
        if o is None or math.isnan(row.foerstner) or math.isnan(o.foerstner):
            continue
        if o.foerstner > row.foerstner + OPTIMALITY_SLACK:
            violations.append(f"{row.model} t_e={_te_label(row.t_e)} r={row.rank}: Förstner "
                              f"OLR {o.foerstner:.6g} > {row.method} {row.foerstner:.6g}")
        if o.exact_risk > row.exact_risk + OPTIMALITY_SLACK:
            violations.append(f"{row.model} t_e={_te_label(row.t_e)} r={row.rank}: risk "
                              f"OLR {o.exact_risk:.12g} > {row.method} {row.exact_risk:.12g}")
    return violations


def _soft_agreement(rows, config):
    """TLBT should be within 10 % of BT at the largest t_e and rank."""
    te, r = max(config.end_times), max(config.ranks)
    msgs = []
    by = {(row.model, row.method): row for row in rows if row.t_e == te and row.rank == r}
    for (model, method), row in by.items():
        if method != "TLBT" or (model, "BT") not in by:
            continue
        bt = by[(model, "BT")].foerstner
        if not (abs(row.foerstner - bt) <= SOFT_AGREEMENT * abs(bt)):
            msgs.append(f"{model}: TLBT Förstner {row.foerstner:.6g} not within 10% of "
                        f"BT {bt:.6g} at t_e={_te_label(te)}, r={r}")
    return msgs


def run_experiment(config, out_dir=None):
    """Run the sweep described by `config`.

    Rows are ordered model size, end time, method, rank.  When `out_dir`
    (or ``config.out``) is set the CSV files are written there.

    Raises
    ------
    ConfigError
        For invalid configurations, before any computation; in particular
        :class:`~balred.errors.UnstableModelError` when BT is requested for
        an unstable model.
    """
    config.validate()
    report = ExperimentReport(config)
    systems = {}
    for d in config.sizes:
        system = build_system(config, d)
        label = model_label(config, system.d)
        _check_stability(config, system, label)
        if max(config.ranks) > system.d:
            raise ConfigError(f"{label}: rank {max(config.ranks)} exceeds d = {system.d}")
        systems[label] = system
    variants = _variants(config)
    workers = _worker_count()
    for label, system in systems.items():
        report.spectral_abscissa[label] = models.spectral_abscissa(system.A)
        report.dimensions[label] = system.d
        given = build_prior(config, system)
        if config.compatible:
            priors = {"NC": given, "C": gr.make_compatible_prior(system.A, given)}
        else:
            priors = {"given": given}
        noise = build_noise(config, system)
        for te in config.end_times:
            case = _Case(config, system, priors, noise, te)
            key_of = (lambda v: v.approx) if config.compatible else (lambda v: "given")
            for v in variants:
                if v.method == "OLR":
                    continue
                # Hankel spectrum per Gramian pair, once
                pair = case.gramian_pair(v.method, key_of(v))
                name = v.method if not config.compatible else f"{v.method} {v.approx}"
                if (label, name, float(te)) not in report.hankel:
                    report.hankel[(label, name, float(te))] = reduction.hankel_values(
                        pair.reach_factor, pair.obs_factor)
            jobs = []
            for v in variants:
                vv = v if config.compatible else _Variant(v.label, v.method, "given", "given")
                for r in config.ranks:
                    jobs.append((vv, r))

            def run(job, case=case, label=label, te=te):
                return _row_job(config, case, label, job[0], te, job[1])

            if workers > 1:
                with ThreadPoolExecutor(workers) as pool:
                    results = list(pool.map(run, jobs))
            else:
                results = [run(j) for j in jobs]
            for row, note in results:
                report.rows.append(row)
                if note:
                    report.warnings.append(note)
                    log.warning(note)
    report.optimality_violations = _check_optimality(report.rows)
    for v in report.optimality_violations:
        log.error("optimality violated: %s", v)
    soft = _soft_agreement(report.rows, config)
    for msg in soft:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    report.warnings.extend(soft)
    target = out_dir if out_dir is not None else config.out
    if target is not None:
        emit_csv(report, Path(target) / "results.csv")
    return report


__all__ = [
    "ExperimentConfig", "ExperimentReport", "ExperimentRow", "PRESETS", "load_config",
    "config_from_mapping", "run_experiment", "emit_csv", "build_system", "build_prior",
    "build_noise", "model_label",
]
