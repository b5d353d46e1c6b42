"""Command-line front end.

Exit status: 0 on success, 1 if any sweep point failed (partial results are
still written), 2 on usage or config-content errors, 3 when a file cannot be
read or written.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from .allocator import ScenarioKind, SolverError, solve, verify_kkt
from .experiments import (SweepSpec, WeightLaw, cap_collision_rate, experiment_rng,
                          fig2_validation, run_sweep, sinr_cdf_check, trial_rng, violation_audit)
from .model import (ChannelRealization, ParameterError, draw_direct_means, sample_realization)

SUBCOMMANDS = ("solve", "sweep", "validate-cdf", "validate-fig2", "audit-collision")
EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class CliInvocation:
    subcommand: str
    config_path: str
    output_path: str
    seed_override: int | None = None
    format: str = "csv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crofdma", description="Resource allocation for OFDMA cognitive radio "
                     "with imperfect cross-link knowledge.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", required=True, help="output file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--format", choices=("csv", "json"), default=None,
                       help="output format (default: from the --out suffix)")
    return parser


def parse_args(argv) -> CliInvocation:
    args = _parser().parse_args(argv)
    if not args.config or not args.out:
        raise UsageError("--config and --out must be nonempty paths")
    fmt = args.format
    if fmt is None:
        suffix = Path(args.out).suffix.lower()
        fmt = "json" if suffix == ".json" or (args.subcommand == "solve" and suffix != ".csv") else "csv"
    return CliInvocation(args.subcommand, args.config, args.out, args.seed, fmt)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return str(x) if isinstance(x, int) else repr(float(x))


def _realization(rc: config_mod.RunConfig, est, seed: int) -> ChannelRealization:
    cfg = rc.system
    given = rc.section("solve")
    if "direct_gains" not in given and "cross_gains" not in given:
        dm = draw_direct_means(cfg, experiment_rng(seed))
        return sample_realization(cfg, est, trial_rng(seed, 0), dm)
    if "direct_gains" not in given or "cross_gains" not in given:
        raise ParameterError("solve.direct_gains and solve.cross_gains must be given together")
    gains = np.asarray(given["direct_gains"], dtype=float)
    cross = np.asarray(given["cross_gains"], dtype=complex)
    if gains.size != cfg.n_users * cfg.n_subcarriers or cross.size != cfg.n_subcarriers:
        raise ParameterError("solve.direct_gains needs n_users*n_subcarriers values and "
                             "solve.cross_gains needs n_subcarriers values")
    gains = gains.reshape(cfg.n_users, cfg.n_subcarriers)
    return ChannelRealization(gains, cross, cross.copy(), np.zeros_like(cross),
                              cfg.nominal_power * gains / cfg.total_noise, None)


def _estimation(rc: config_mod.RunConfig):
    sc = rc.scenario
    spec = SweepSpec("i_th", (rc.system.i_threshold,), 1, sc, rc.system, rc.estimate_variance)
    return spec.estimation(rc.system, sc)


def _run_solve(inv, rc, seed):
    est = _estimation(rc)
    real = _realization(rc, est, seed)
    res = solve(rc.system, est, rc.scenario, real, rc.solver)
    kkt = verify_kkt(res, res.duals, res.weights, rc.system)
    if inv.format == "csv":
        rows = [[n, k, int(res.phi[n, k]), _num(res.power[n, k]), _num(res.constellation[n, k]),
                 _num(res.rates[n, k]), _num(res.quantized_rates[n, k]), _num(res.cutoff[n, k])]
                for n in range(res.phi.shape[0]) for k in range(res.phi.shape[1])]
        return _csv(rows, ("user", "subcarrier", "phi", "power", "constellation", "rate",
                           "quantized_rate", "cutoff")), EXIT_OK
    doc = {
        "seed": seed,
        "scenario": rc.scenario.kind.value,
        "phi": res.phi.tolist(),
        "power": res.power.tolist(),
        "constellation": res.constellation.tolist(),
        "rates": res.rates.tolist(),
        "quantized_rates": np.asarray(res.quantized_rates).tolist(),
        "cutoff": res.cutoff.tolist(),
        "sinr": res.sinr.tolist(),
        "ase": res.ase,
        "ase_quantized": res.ase_quantized,
        "duals": {"mu": res.duals.mu, "eta": res.duals.eta, "iterations": res.n_iter},
        "zeta": res.zeta,
        "min_term": res.min_term,
        "interference_weights": res.weights.w_k.tolist(),
        "interference_budget": res.weights.i_eff,
        "feasibility": res.feasibility,
        "kkt_passed": kkt.passed,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n", EXIT_OK


def _run_sweep(inv, rc, seed):
    s = rc.section("sweep")
    if "variable" not in s or "grid" not in s:
        raise ParameterError("sweep needs sweep.variable and sweep.grid")
    spec = SweepSpec(s["variable"], s["grid"], s.get("trials", 500), rc.scenario, rc.system,
                     rc.estimate_variance, seed, s.get("shared_power", True),
                     s.get("quantized", False), s.get("kkt_tol", 1e-3), rc.solver)
    result = run_sweep(spec)
    text = result.to_json() + "\n" if inv.format == "json" else result.to_csv()
    return text, EXIT_FAILED if result.failed else EXIT_OK


def _run_validate_cdf(inv, rc, seed):
    v = rc.section("validate")
    check = sinr_cdf_check(rc.system, v.get("samples", 100_000), seed, v.get("direct_mean", 1.0),
                           v.get("convention", "total"))
    g, model = check["gamma"], check["cdf"]
    idx = np.unique(np.linspace(0, g.size - 1, min(200, g.size)).astype(int))
    emp = (idx + 1) / g.size
    if inv.format == "json":
        doc = {"seed": seed, "sup_gap": check["sup_gap"], "gamma": g[idx].tolist(),
               "empirical": emp.tolist(), "approx": model[idx].tolist()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n", EXIT_OK
    rows = [[_num(a), _num(b), _num(c)] for a, b, c in zip(g[idx], emp, model[idx])]
    return _csv(rows + [["sup_gap", _num(check["sup_gap"]), ""]],
                ("gamma", "empirical", "approx")), EXIT_OK


def _weight_law(f: dict) -> WeightLaw:
    family = f.get("weight_law", "chi-square")
    if family == "chi-square":
        return WeightLaw.chi_square(f.get("shape", 2.0), f.get("location", 2.0))
    if family == "gamma":
        if "location" in f:
            return WeightLaw("gamma", f.get("shape", 2.0), f.get("scale", 0.5), f["location"])
        return WeightLaw.gamma(f.get("shape", 2.0), f.get("scale", 0.5), f.get("mean", 4.0))
    raise ParameterError(f"unknown fig2.weight_law {family!r}")


def _run_validate_fig2(inv, rc, seed):
    f = rc.section("fig2")
    law = _weight_law(f)
    res = fig2_validation(law, f.get("k", rc.system.n_subcarriers), f.get("samples", 100_000),
                          f.get("variance", 1.0), rng=experiment_rng(seed))
    if inv.format == "json":
        doc = {"seed": seed, "sup_gap": res.sup_gap, "metadata": res.metadata,
               "gamma": res.x.tolist(), "empirical": res.empirical.tolist(),
               "approx": res.approx.tolist()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n", EXIT_OK
    rows = [[_num(a), _num(b), _num(c)] for a, b, c in zip(res.x, res.empirical, res.approx)]
    return _csv(rows + [["sup_gap", _num(res.sup_gap), ""]],
                ("gamma", "empirical", "approx")), EXIT_OK


def _run_audit(inv, rc, seed):
    a = rc.section("audit")
    if rc.scenario.kind is not ScenarioKind.PROBABILISTIC:
        raise ParameterError("audit-collision needs scenario.kind = probabilistic")
    est = _estimation(rc)
    res = violation_audit(rc.system, est, rc.scenario, a.get("trials", 10_000), seed,
                          a.get("zero_power", False), solver=rc.solver)
    cap_rate = cap_collision_rate(est, rc.system.n_subcarriers, rc.scenario.eps,
                                  rc.system.i_threshold, a.get("trials", 10_000),
                                  experiment_rng(seed + 1))
    record = {"violation_rate": res.rate, "binomial_stderr": res.stderr, "trials": res.trials,
              "ase_mean": res.ase_mean, "saturated_cap_rate": cap_rate, "eps": rc.scenario.eps,
              "cap": res.metadata["cap"], "seed": seed}
    if inv.format == "json":
        return json.dumps(record | {"metadata": res.metadata}, indent=2, sort_keys=True) + "\n", EXIT_OK
    return _csv([[k, _num(v)] for k, v in record.items()], ("quantity", "value")), EXIT_OK


_DISPATCH = {"solve": _run_solve, "sweep": _run_sweep, "validate-cdf": _run_validate_cdf,
             "validate-fig2": _run_validate_fig2, "audit-collision": _run_audit}


def run(inv: CliInvocation) -> int:
    try:
        rc = config_mod.load(inv.config_path)
    except OSError as exc:
        print(f"error: cannot read config {inv.config_path!r}: {exc.strerror or exc}",
              file=sys.stderr)
        return EXIT_IO
    except config_mod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seed = rc.system.rng_seed if inv.seed_override is None else inv.seed_override
    try:
        text, status = _DISPATCH[inv.subcommand](inv, rc, seed)
    except (ParameterError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ParameterError) else EXIT_FAILED
    try:
        Path(inv.output_path).write_text(text, encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write {inv.output_path!r}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    return status


def main(argv=None) -> int:
    try:
        inv = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"{_parser().format_usage().rstrip()}\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return run(inv)
