"""Experiment runner: scenario dispatch plus deterministic CSV/JSON output.

Every run resolves to a fully explicit configuration (model config, scenario
parameters, tolerances), hashes it, and stamps the hash into every output
file.  Identical hash means identical bytes: no timestamps, no machine
info, and reductions over worker results are order-independent.

Precedence for parameter values: command-line flags > config file >
built-in defaults.  Config files are JSON with the shape

    {"scenario": "...", "model": {...}, "parameters": {...},
     "output_dir": "..."}

where ``model`` is either ``{"builtin": <name>}`` or a full model config
as accepted by ``loclab.model.load_model``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import piecewise
from .model import (Model, derive_seed, load_model, operator_suite_model,
                    reference_model, sample_couplings, smooth_demo_model)
from .prufer import (phase_energy_derivative, phase_lambda_derivative,
                     phase_theta_derivative)
from .spectral import count_eigenvalues_below, find_eigenvalues_in_window
from .kernels import (build_kernel_bundle, large_coupling_amplitude,
                      norm_2_to_2, norm_1_to_1)
from .correlator import (correlator_series, decay_fit, fixed_energy_bound_series,
                         operator_bound_rate)

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "CheckResult",
    "ExitReport",
    "SCENARIOS",
    "resolve_config",
    "config_digest",
    "run_scenario",
    "emit_report",
    "main",
]

SCHEMA = "loclab/v1"


class ConfigError(ValueError):
    """Raised for malformed or incomplete run configurations."""


@dataclass
class ScenarioConfig:
    scenario: str
    model: dict
    parameters: dict
    output_dir: Path


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class ExitReport:
    scenario: str
    digest: str
    checks: list[CheckResult]
    artifacts: list[Path]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


@dataclass
class ScenarioResult:
    """Tables become CSV files, summaries become JSON files."""

    tables: list[tuple[str, list[str], list[tuple]]] = field(default_factory=list)
    summaries: list[tuple[str, dict]] = field(default_factory=list)
    checks: list[CheckResult] = field(default_factory=list)


# ---------------------------------------------------------------------------
# configuration


_BUILTIN_MODELS = {
    "reference": reference_model,
    "operator-suite": operator_suite_model,
    "smooth-demo": smooth_demo_model,
}

_DEFAULTS: dict[str, dict] = {
    "identities": {
        "model": {"builtin": "reference"},
        "parameters": {"count": 20, "seed": 1, "h": 1e-4, "tol": 1e-10,
                       "e_cap": 1.0, "max_rel_error": 1e-6},
    },
    "spectrum": {
        "model": {"builtin": "reference"},
        "parameters": {"L": 3, "seed": 1, "tol": 1e-10, "per_cell": 256},
    },
    "correlator-decay": {
        "model": {"builtin": "reference"},
        "parameters": {"L": 6, "distances": [1, 2, 3, 4], "samples": 300,
                       "seed": 1, "min_distance": 1, "workers": 1,
                       "tol": 1e-10},
    },
    "operator-norm": {
        "model": {"builtin": "operator-suite"},
        "parameters": {"cells": [0], "energies": [0.0], "m": 400,
                       "tol": 1e-13, "row_tol": 1e-3, "norm_tol": 5e-3},
    },
    "bound-check": {
        "model": {"builtin": "reference"},
        "parameters": {"L": 2, "n_values": [1, 2], "energy": 1.0,
                       "nodes": 12, "m": 300, "tol": 1e-13, "slack": 0.05},
    },
    "large-coupling": {
        "model": {"builtin": "reference"},
        "parameters": {"lambdas": [1e2, 1e3, 1e4], "beta_count": 10,
                       "seed": 1, "tol": 1e-10},
    },
    "smooth-demo": {
        "model": {"builtin": "smooth-demo"},
        "parameters": {"L": 5, "distances": [1, 2, 3], "samples": 120,
                       "seed": 3, "profile_count": 3, "min_distance": 1,
                       "workers": 1, "tol": 1e-8},
    },
}

# which generic command-line flag feeds which scenario parameter
_FLAG_PARAM = {
    "identities": {"samples": "count", "seed": "seed", "tol": "tol"},
    "spectrum": {"seed": "seed", "tol": "tol", "grid": "per_cell"},
    "correlator-decay": {"samples": "samples", "seed": "seed", "tol": "tol",
                         "workers": "workers"},
    "operator-norm": {"grid": "m", "tol": "tol"},
    "bound-check": {"grid": "m", "tol": "tol"},
    "large-coupling": {"samples": "beta_count", "seed": "seed", "tol": "tol"},
    "smooth-demo": {"samples": "samples", "seed": "seed", "tol": "tol",
                    "workers": "workers"},
}


def _build_model(model_cfg: dict) -> Model:
    if "builtin" in model_cfg:
        name = model_cfg["builtin"]
        extra = sorted(set(model_cfg) - {"builtin"})
        if extra:
            raise ConfigError(f"model key {extra[0]!r} not allowed next to 'builtin'")
        if name not in _BUILTIN_MODELS:
            raise ConfigError(f"unknown builtin model {name!r}; "
                              f"choices: {sorted(_BUILTIN_MODELS)}")
        return _BUILTIN_MODELS[name]()
    try:
        return load_model(model_cfg)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def resolve_config(scenario: str, file_cfg: dict | None = None,
                   overrides: dict | None = None) -> ScenarioConfig:
    """Merge defaults, config-file values, and flag overrides."""
    if scenario not in _DEFAULTS:
        raise ConfigError(f"unknown scenario {scenario!r}; "
                          f"choices: {sorted(_DEFAULTS)}")
    base = _DEFAULTS[scenario]
    model_cfg = dict(base["model"])
    params = dict(base["parameters"])
    out_dir = Path("loclab-out")

    file_cfg = dict(file_cfg or {})
    allowed_top = {"scenario", "model", "parameters", "output_dir"}
    for key in sorted(file_cfg):
        if key not in allowed_top:
            raise ConfigError(f"unknown config key {key!r}")
    if "scenario" in file_cfg and file_cfg["scenario"] != scenario:
        raise ConfigError(f"config file is for scenario "
                          f"{file_cfg['scenario']!r}, not {scenario!r}")
    if "model" in file_cfg:
        if not isinstance(file_cfg["model"], dict):
            raise ConfigError("config key 'model' must be a mapping")
        model_cfg = dict(file_cfg["model"])
    if "parameters" in file_cfg:
        if not isinstance(file_cfg["parameters"], dict):
            raise ConfigError("config key 'parameters' must be a mapping")
        for key in sorted(file_cfg["parameters"]):
            if key not in params:
                raise ConfigError(f"unknown parameter {key!r} for scenario "
                                  f"{scenario!r}; valid: {sorted(params)}")
        params.update(file_cfg["parameters"])
    if "output_dir" in file_cfg:
        out_dir = Path(file_cfg["output_dir"])

    overrides = dict(overrides or {})
    if overrides.get("out") is not None:
        out_dir = Path(overrides.pop("out"))
    else:
        overrides.pop("out", None)
    flag_map = _FLAG_PARAM[scenario]
    for flag, value in sorted(overrides.items()):
        if value is None:
            continue
        if flag not in flag_map:
            raise ConfigError(f"scenario {scenario!r} does not accept --{flag}")
        params[flag_map[flag]] = value
    return ScenarioConfig(scenario, model_cfg, params, out_dir)


def config_digest(config: ScenarioConfig) -> str:
    """Hash over every numeric parameter of the run (tolerances included)."""
    blob = json.dumps(
        {"scenario": config.scenario, "model": config.model,
         "parameters": config.parameters},
        sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# deterministic emission


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, scenario: str, digest: str, table: str,
               columns: list[str], rows: list[tuple]) -> None:
    lines = [f"# {SCHEMA} scenario={scenario} table={table}",
             f"# config={digest}",
             ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_json(path: Path, scenario: str, digest: str, payload: dict) -> None:
    doc = {"schema": SCHEMA, "scenario": scenario, "config": digest}
    doc.update(payload)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=float)
                    + "\n", encoding="utf-8", newline="\n")


def emit_report(result: ScenarioResult, config: ScenarioConfig,
                digest: str) -> list[Path]:
    """Write all tables and summaries; returns the artifact paths."""
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, columns, rows in result.tables:
        p = out / f"{config.scenario}_{name}.csv"
        _write_csv(p, config.scenario, digest, name, columns, rows)
        paths.append(p)
    for name, payload in result.summaries:
        p = out / f"{config.scenario}_{name}.json"
        _write_json(p, config.scenario, digest, payload)
        paths.append(p)
    report = out / f"{config.scenario}_report.json"
    _write_json(report, config.scenario, digest, {
        "checks": [{"name": c.name, "passed": bool(c.passed),
                    "detail": c.detail} for c in result.checks],
        "parameters": config.parameters,
        "model": config.model,
    })
    paths.append(report)
    return sorted(paths)


# ---------------------------------------------------------------------------
# scenario runners


def _run_identities(model: Model, p: dict) -> ScenarioResult:
    count, h, tol = int(p["count"]), float(p["h"]), float(p["tol"])
    # Keep |E| moderate: the h^2 truncation constant grows like the cube
    # of the cell stiffness, and the pass bound below assumes the
    # documented h/tol balance.  Stiffer instances are exercised by the
    # h-scaling property tests, not by this pass/fail sweep.
    e_cap = min(model.e_max, float(p["e_cap"]))
    rows = []
    worst = 0.0
    for i in range(count):
        rng = np.random.default_rng(derive_seed(int(p["seed"]), i))
        cell = int(rng.integers(-3, 4))
        lam = float(sample_couplings(model.coupling, 1,
                                     derive_seed(int(p["seed"]), 1000 + i))[0])
        E = float(rng.uniform(-e_cap, e_cap))
        theta0 = float(rng.uniform(0.0, math.pi))
        q = model.background.cell(cell)
        v = model.site.table
        q_tot = q + v.scale(lam)
        rels = []
        for num, ana in (phase_theta_derivative(q_tot, E, -1.0, 0.0, theta0,
                                                h=h, tol=tol),
                         phase_lambda_derivative(q, v, lam, E, -1.0, 0.0,
                                                 theta0, h=h, tol=tol),
                         phase_energy_derivative(q_tot, E, -1.0, 0.0, theta0,
                                                 h=h, tol=tol)):
            rels.append(abs(num - ana) / max(abs(ana), 1e-12))
        worst = max(worst, *rels)
        rows.append((i, cell, lam, E, theta0, rels[0], rels[1], rels[2]))
    bound = float(p["max_rel_error"])
    res = ScenarioResult()
    res.tables.append(("derivatives",
                       ["instance", "cell", "coupling", "energy", "theta0",
                        "rel_err_dtheta", "rel_err_dcoupling", "rel_err_denergy"],
                       rows))
    res.summaries.append(("summary", {"instances": count,
                                      "worst_rel_error": worst}))
    res.checks.append(CheckResult(
        "phase-derivative-identities", worst < bound,
        f"worst relative error {worst:.3e} vs bound {bound:.1e}"))
    return res


def _run_spectrum(model: Model, p: dict) -> ScenarioResult:
    L, tol = int(p["L"]), float(p["tol"])
    omega = sample_couplings(model.coupling, 2 * L,
                             derive_seed(int(p["seed"]), 0))
    pairs = find_eigenvalues_in_window(model, omega, L, tol=tol,
                                       per_cell=int(p["per_cell"]))
    rows = [(q.index, q.energy, q.norm_check, q.boundary_flag) for q in pairs]
    prof = []
    for q in pairs:
        for c, mass in enumerate(q.cell_mass):
            prof.append((q.index, -L + c, float(mass)))
    lo = count_eigenvalues_below(model, omega, L, -model.e_max, tol=tol)
    hi = count_eigenvalues_below(model, omega, L, model.e_max, tol=tol)
    norm_dev = max((abs(q.norm_check - 1.0) for q in pairs), default=0.0)
    res = ScenarioResult()
    res.tables.append(("eigenvalues",
                       ["index", "energy", "norm_check", "boundary"], rows))
    res.tables.append(("cell_mass", ["index", "cell_left", "mass"], prof))
    res.summaries.append(("summary", {
        "L": L, "count": len(pairs),
        "window": [-model.e_max, model.e_max],
        "couplings": [float(w) for w in omega]}))
    res.checks.append(CheckResult(
        "eigenfunction-normalization", norm_dev <= 1e-6,
        f"max |norm - 1| = {norm_dev:.3e}"))
    res.checks.append(CheckResult(
        "oscillation-count", hi - lo == len(pairs),
        f"phase winding predicts {hi - lo}, solver found {len(pairs)}"))
    return res


def _run_correlator_decay(model: Model, p: dict) -> ScenarioResult:
    distances = [int(n) for n in p["distances"]]
    series = correlator_series(model, int(p["L"]), distances,
                               int(p["samples"]), int(p["seed"]),
                               tol=float(p["tol"]), workers=int(p["workers"]))
    fit = decay_fit(series, min_distance=int(p["min_distance"]))
    rows = []
    for n, mean, se in zip(series.distances, series.means, series.std_errors):
        log_mean = math.log(mean) if mean > 0 else float("nan")
        log_se = se / mean if mean > 0 else float("nan")
        rows.append((n, mean, se, log_mean, log_se, series.sample_count))
    res = ScenarioResult()
    res.tables.append(("series",
                       ["distance", "mean", "std_error", "log_mean",
                        "log_std_error", "samples"], rows))
    res.summaries.append(("fit", {
        "amplitude": fit.amplitude, "rate": fit.rate,
        "r_squared": fit.r_squared, "rate_std_error": fit.rate_std_error,
        "fit_window": list(fit.fit_window), "dropped": fit.dropped,
        "L": series.L, "samples": series.sample_count,
        "mean_pair_count": series.mean_pair_count}))
    res.checks.append(CheckResult(
        "positive-means", bool(np.all(series.means > 0)),
        "all correlator means positive"))
    res.checks.append(CheckResult(
        "positive-decay-rate", fit.rate > 0,
        f"fitted rate {fit.rate:.4f} (std error {fit.rate_std_error:.4f})"))
    return res


def _run_operator_norm(model: Model, p: dict) -> ScenarioResult:
    cells = [int(c) for c in p["cells"]]
    energies = [float(e) for e in p["energies"]]
    m, tol = int(p["m"]), float(p["tol"])
    rate = operator_bound_rate(model, cells, energies, m=m, tol=tol)
    rows = []
    row_dev_worst = 0.0
    for a, cell in enumerate(cells):
        g = model.background.cell(cell)
        for b, E in enumerate(energies):
            bundle = build_kernel_bundle(model, g, E=E, m=m, tol=tol)
            rdev = abs(norm_1_to_1(bundle.transition_adjoint) - 1.0)
            cdev = abs(norm_1_to_1(bundle.weighted) - 1.0)
            row_dev_worst = max(row_dev_worst, rdev, cdev)
            rows.append((cell, E, rate.norms[a, b], rdev, cdev))
    refine = []
    g0 = model.background.cell(cells[0])
    step = 2 * model.n_winding
    for frac in (4, 2, 1):
        mm = max(step, (m // frac) // step * step)
        bundle = build_kernel_bundle(model, g0, E=energies[0], m=mm, tol=tol)
        refine.append((mm, norm_2_to_2(bundle.contraction)))
    res = ScenarioResult()
    res.tables.append(("norms",
                       ["cell", "energy", "contraction_norm",
                        "row_sum_deviation", "column_sum_deviation"], rows))
    res.tables.append(("refinement", ["m", "contraction_norm"], refine))
    res.summaries.append(("rate", {
        "gamma": rate.gamma, "eta": rate.eta_op,
        "contraction": bool(rate.contraction), "m": m,
        "cells": cells, "energies": energies}))
    res.checks.append(CheckResult(
        "stochastic-row-sums", row_dev_worst <= float(p["row_tol"]),
        f"worst row/column-sum deviation {row_dev_worst:.3e}"))
    res.checks.append(CheckResult(
        "contraction-norm-bound", rate.gamma <= 1.0 + float(p["norm_tol"]),
        f"max norm {rate.gamma:.6f} vs 1 + {float(p['norm_tol']):.0e}"))
    res.checks.append(CheckResult(
        "strict-contraction", bool(rate.contraction),
        f"gamma = {rate.gamma:.6f}"))
    return res


def _run_bound_check(model: Model, p: dict) -> ScenarioResult:
    n_values = [int(n) for n in p["n_values"]]
    reports = fixed_energy_bound_series(
        model, int(p["L"]), n_values, float(p["energy"]),
        n_nodes=int(p["nodes"]), m=int(p["m"]), tol=float(p["tol"]))
    rows = [(r.n, r.lhs, r.rhs, r.lhs / r.rhs if r.rhs > 0 else float("inf"))
            for r in reports]
    slack = float(p["slack"])
    ok_bound = all(r.lhs <= r.rhs * (1.0 + slack) for r in reports)
    rhs_vals = [r.rhs for r in reports]
    ok_monotone = all(b <= a * (1.0 + 1e-12)
                      for a, b in zip(rhs_vals, rhs_vals[1:]))
    res = ScenarioResult()
    res.tables.append(("bound", ["n", "lhs", "rhs", "ratio"], rows))
    res.summaries.append(("summary", {
        "L": int(p["L"]), "energy": float(p["energy"]),
        "constant": reports[0].constant,
        "j_values": list(reports[0].j_values),
        "lhs_evaluations": reports[0].lhs_evaluations}))
    res.checks.append(CheckResult(
        "pointwise-bound", ok_bound,
        f"lhs <= rhs within {slack:.0%} slack at every n"))
    res.checks.append(CheckResult(
        "rhs-monotone-decreasing", ok_monotone,
        "discretized bound decreases with distance"))
    return res


def _run_large_coupling(model: Model, p: dict) -> ScenarioResult:
    lambdas = [float(v) for v in p["lambdas"]]
    count = int(p["beta_count"])
    g = model.background.cell(0)
    rows = []
    strict = True
    for i in range(count):
        rng = np.random.default_rng(derive_seed(int(p["seed"]), i))
        beta = float(rng.uniform(0.0, math.pi))
        amps = large_coupling_amplitude(model, g, beta, lambdas,
                                        rtol=float(p["tol"]))
        strict = strict and bool(np.all(np.diff(amps) > 0))
        for lam, a in zip(lambdas, amps):
            rows.append((i, beta, lam, float(a)))
    res = ScenarioResult()
    res.tables.append(("amplitude",
                       ["instance", "beta", "coupling", "log_amplitude"],
                       rows))
    res.summaries.append(("summary", {"lambdas": lambdas, "betas": count}))
    res.checks.append(CheckResult(
        "amplitude-growth", strict,
        "log-amplitude strictly increasing along the coupling sweep"))
    return res


def _run_smooth_demo(model: Model, p: dict) -> ScenarioResult:
    L = int(p["L"])
    omega = sample_couplings(model.coupling, 2 * L,
                             derive_seed(int(p["seed"]), 0))
    pairs = find_eigenvalues_in_window(model, omega, L, tol=float(p["tol"]))
    prof = []
    for q in pairs[: int(p["profile_count"])]:
        for c, mass in enumerate(q.cell_mass):
            prof.append((q.index, -L + c, float(mass)))
    distances = [int(n) for n in p["distances"]]
    series = correlator_series(model, L, distances, int(p["samples"]),
                               int(p["seed"]), tol=float(p["tol"]),
                               workers=int(p["workers"]))
    fit = decay_fit(series, min_distance=int(p["min_distance"]))
    rows = [(n, mean, se) for n, mean, se
            in zip(series.distances, series.means, series.std_errors)]
    res = ScenarioResult()
    res.tables.append(("profiles", ["index", "cell_left", "mass"], prof))
    res.tables.append(("series", ["distance", "mean", "std_error"], rows))
    res.summaries.append(("fit", {
        "amplitude": fit.amplitude, "rate": fit.rate,
        "r_squared": fit.r_squared, "rate_std_error": fit.rate_std_error,
        "eigenvalues": [q.energy for q in pairs]}))
    res.checks.append(CheckResult(
        "states-found", len(pairs) > 0,
        f"{len(pairs)} states in the energy window"))
    res.checks.append(CheckResult(
        "profile-normalization",
        all(abs(sum(q.cell_mass) - 1.0) < 1e-6 for q in pairs),
        "cell masses of each state sum to one"))
    res.checks.append(CheckResult(
        "finite-decay-fit", math.isfinite(fit.rate),
        f"fitted rate {fit.rate:.4f}"))
    return res


_RUNNERS = {
    "identities": _run_identities,
    "spectrum": _run_spectrum,
    "correlator-decay": _run_correlator_decay,
    "operator-norm": _run_operator_norm,
    "bound-check": _run_bound_check,
    "large-coupling": _run_large_coupling,
    "smooth-demo": _run_smooth_demo,
}

SCENARIOS = tuple(sorted(_RUNNERS))


def run_scenario(config: ScenarioConfig) -> ExitReport:
    """Run one scenario end to end and write its artifacts."""
    digest = config_digest(config)
    model = _build_model(config.model)
    result = _RUNNERS[config.scenario](model, config.parameters)
    paths = emit_report(result, config, digest)
    return ExitReport(config.scenario, digest, result.checks, paths)


# ---------------------------------------------------------------------------
# command line


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: "
                          f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loclab",
        description="Numerical experiments for one-dimensional random "
                    "Schrodinger operators.")
    sub = parser.add_subparsers(dest="scenario", required=True)
    for name in SCENARIOS:
        sp = sub.add_parser(name, help=f"run the {name} scenario")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--samples", type=int, help="sample / instance count")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--grid", type=int, help="grid resolution")
        sp.add_argument("--tol", type=float, help="solver tolerance")
        sp.add_argument("--workers", type=int, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        file_cfg = _load_config_file(args.config) if args.config else {}
        overrides = {"samples": args.samples, "seed": args.seed,
                     "out": args.out, "grid": args.grid, "tol": args.tol,
                     "workers": args.workers}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        config = resolve_config(args.scenario, file_cfg, overrides)
        report = run_scenario(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for check in report.checks:
        mark = "pass" if check.passed else "FAIL"
        print(f"[{mark}] {check.name}: {check.detail}")
    for path in report.artifacts:
        print(f"wrote {path}")
    print(f"config hash {report.digest}")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
