"""Command-line front end: ``riskstop {price,sddp,lab,simulate} --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .amput import GridCoverageError, TreeTooLarge, extract_regions, price_basket, price_put, \
    root_value, value_table_csv
from .lattice import ModelError, ModelSpec, discretize, sample_paths
from .preference import (FlatSystem, MaxType, NestedSystem, check_dynamic_consistency,
                         check_recursivity)
from .risk import AVaR, EVaR, Expectation, RiskSpec, RiskSpecError, ScalingError
from .sddp import SDDPConfig, concave_outer_loop, simulate_policy, solve
from .snell import (OrderingPreconditionError, check_delay_ordering, check_minimal_dominating,
                    check_supermartingale, enumerate_stopping_oracle, optimal_stopping_time,
                    random_lattice, random_tree, snell_envelope)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_SEED = 0


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


FIELDS = {
    "price": {"model", "risk", "discretization", "grid", "seed", "evaluation"},
    "sddp": {"model", "risk", "N", "iterations", "seed", "upper_cadence", "forward_paths",
             "upper_points", "audit", "evaluation_paths", "bins", "concave"},
    "lab": {"seed", "trials", "T", "specs", "property_trials"},
    "simulate": {"model", "count", "seed", "discretization"},
}
DISC_FIELDS = {"mode", "N", "same_atoms"}
GRID_FIELDS = {"n_points", "width", "exact_limit"}
CONCAVE_FIELDS = {"lambda", "alpha", "max_outer", "scenarios", "tol"}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text: str, key: str) -> str:
    line = _line_of(text, key)
    return f"line {line}: " if line else ""


def load_config(path: str | None, command: str) -> tuple[dict[str, Any], str]:
    if path is None:
        return {}, ""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: line 1: config must be a JSON object")
    _reject_unknown(cfg, FIELDS[command], text, path)
    for key, allowed in (("discretization", DISC_FIELDS), ("grid", GRID_FIELDS),
                         ("concave", CONCAVE_FIELDS)):
        if isinstance(cfg.get(key), dict):
            _reject_unknown(cfg[key], allowed, text, path)
    return cfg, text


def _reject_unknown(d: dict, allowed: set, text: str, path: str) -> None:
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}: {_where(text, k)}unknown field {k!r}")


def _build(fn, value, key: str, text: str, path: str):
    try:
        return fn(value)
    except (ModelError, RiskSpecError, TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"{path}: {_where(text, key)}invalid {key}: {e}") from None


def _need(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ConfigError(f"{path}: missing required field {key!r}")
    return cfg[key]


def _risk_list(value) -> list[RiskSpec]:
    items = value if isinstance(value, list) else [value]
    return [RiskSpec.from_dict(v) for v in items]


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return p


def _pint(cfg: dict, key: str, default: int, text: str, path: str, minimum: int = 0) -> int:
    v = cfg.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{path}: {_where(text, key)}{key} must be an integer >= {minimum}")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_price(cfg: dict, text: str, path: str, seed: int, out: Path) -> int:
    model = _build(ModelSpec.from_dict, _need(cfg, "model", path), "model", text, path)
    specs = _build(_risk_list, cfg.get("risk", {"kind": "expectation"}), "risk", text, path)
    dcfg = cfg.get("discretization", {})
    mode = dcfg.get("mode", "montecarlo")
    N = _pint(dcfg, "N", 2 if mode == "binomial" else 100, text, path, 1)
    disc = _build(lambda _: discretize(model, N, seed=seed, mode=mode,
                                       same_atoms=bool(dcfg.get("same_atoms", False))),
                  None, "discretization", text, path)
    grid_kw = dict(cfg.get("grid", {}))
    summary = {"seed": seed, "results": []}
    many = len(specs) > 1
    for k, spec in enumerate(specs):
        suffix = f"_{k}" if many else ""
        if model.univariate:
            vf = price_put(model, disc, spec, **grid_kw)
            value = root_value(vf)
            _write(out, f"values{suffix}.csv", value_table_csv(vf))
            _write(out, f"regions{suffix}.csv", extract_regions(vf).to_csv())
        else:
            res = price_basket(model, disc, spec, evaluation=cfg.get("evaluation", "exact-tree"))
            value = res.value
        summary["results"].append({"risk": spec.to_dict(), "label": spec.label(), "value": value})
        print(f"root_value[{spec.label()}] = {value!r}")
    _write(out, "summary.json", json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_sddp(cfg: dict, text: str, path: str, seed: int, out: Path) -> int:
    model = _build(ModelSpec.from_dict, _need(cfg, "model", path), "model", text, path)
    N = _pint(cfg, "N", 100, text, path, 1)
    iterations = _pint(cfg, "iterations", 100, text, path, 1)
    conf = SDDPConfig(forward_paths=_pint(cfg, "forward_paths", 4, text, path, 1),
                      upper_cadence=_pint(cfg, "upper_cadence", 25, text, path, 1),
                      upper_points=_pint(cfg, "upper_points", 2000, text, path, 2),
                      audit=bool(cfg.get("audit", True)))
    disc = discretize(model, N, seed=seed)
    summary: dict[str, Any] = {"seed": seed}
    if "concave" in cfg:
        c = cfg["concave"]
        if "risk" in cfg:
            raise ConfigError(f"{path}: {_where(text, 'risk')}give either risk or concave, not both")
        lam, alpha = c.get("lambda", 0.2), c.get("alpha", 0.05)
        _build(lambda _: RiskSpec("mean_avar", alpha=alpha, lam=lam), None, "concave", text, path)
        cres = concave_outer_loop(model, lam, alpha, iterations=iterations, seed=seed, config=conf,
                                  disc=disc, scenarios=_pint(c, "scenarios", 200, text, path, 1),
                                  max_outer=_pint(c, "max_outer", 10, text, path, 1),
                                  tol=float(c.get("tol", 1e-6)))
        res = cres.result
        summary.update(status=cres.status, outer_iterations=cres.outer_iterations,
                       tv_changes=cres.changes)
    else:
        spec = _build(RiskSpec.from_dict, cfg.get("risk", {"kind": "expectation"}), "risk", text, path)
        res = _build(lambda _: solve(model, spec, iterations=iterations, seed=seed, config=conf,
                                     disc=disc), None, "risk", text, path)
    count = _pint(cfg, "evaluation_paths", 2000, text, path, 1)
    emp = sample_paths(model, count, seed=seed + 1, disc=res.disc)
    true = sample_paths(model, count, seed=seed + 1)
    p_emp, t_emp = simulate_policy(model, res.approx, emp.states)
    p_true, t_true = simulate_policy(model, res.approx, true.states)
    _write(out, "trace.csv", res.trace_csv(timing=False))
    _write(out, "policy.json", res.policy_json() + "\n")
    stages = np.arange(model.T + 1)
    rows = ["stage,empirical,true"] + [
        f"{t},{int(np.sum(t_emp == t))},{int(np.sum(t_true == t))}" for t in stages]
    _write(out, "stopping_hist.csv", "\n".join(rows) + "\n")
    bins = _pint(cfg, "bins", 30, text, path, 1)
    lo = float(min(p_emp.min(), p_true.min()))
    hi = float(max(p_emp.max(), p_true.max()))
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    c_emp, _ = np.histogram(p_emp, edges)
    c_true, _ = np.histogram(p_true, edges)
    rows = ["profit_lo,profit_hi,empirical,true"] + [
        f"{edges[i]!r},{edges[i + 1]!r},{int(c_emp[i])},{int(c_true[i])}" for i in range(bins)]
    _write(out, "profit_hist.csv", "\n".join(rows) + "\n")
    summary.update(lower=res.lower_bound, upper=res.upper_bound, gap=res.gap(), audit=res.audit,
                   cuts=res.approx.n_cuts, policy_mean_empirical=float(p_emp.mean()),
                   policy_mean_true=float(p_true.mean()),
                   elapsed_ms=res.trace[-1].elapsed_ms if res.trace else 0.0)
    _write(out, "summary.json", json.dumps(summary, indent=2) + "\n")
    gap = res.gap()
    print(f"lower = {res.lower_bound!r}  upper = {res.upper_bound!r}  gap = {gap!r}")
    return EXIT_OK


LAB_SPECS = {
    "expectation": Expectation(), "avar0.3": AVaR(0.3), "avar0.7": AVaR(0.7), "evar0.5": EVaR(0.5),
}


def run_lab(seed: int, trials: int = 100, T: int = 3, spec_names=None,
            property_trials: int = 1000) -> dict[str, Any]:
    """Battery of structural checks on random trees; returns a JSON-ready report."""
    names = list(spec_names or LAB_SPECS)
    specs = [LAB_SPECS[n] for n in names]
    rng = np.random.default_rng(seed)
    checks = {k: {"cases": 0, "failures": 0} for k in
              ("oracle_equality", "tau_order", "supermartingale", "minimality", "delay_ordering")}
    for i in range(trials):
        tree = random_tree(rng, int(rng.integers(1, T + 1)))
        spec = specs[i % len(specs)]
        res = snell_envelope(tree, spec)
        orc = enumerate_stopping_oracle(tree, spec)
        tau_star = optimal_stopping_time(res, tree).leaf_times(tree)
        for key, ok in (("oracle_equality", abs(orc.value - res.root_value) <= 1e-9),
                        ("tau_order", bool(np.all(orc.tau.leaf_times(tree) >= tau_star))),
                        ("supermartingale", check_supermartingale(res.values, tree, spec)[0]),
                        ("minimality", check_minimal_dominating(res, tree, spec)[0])):
            checks[key]["cases"] += 1
            checks[key]["failures"] += int(not ok)
        lat = random_lattice(rng, int(rng.integers(1, T + 1))).to_tree()
        try:
            ok = all(check_delay_ordering(lat, EVaR(a), EVaR(b)) for a, b in ((0, .5), (.5, 1)))
        except OrderingPreconditionError:
            ok = False
        checks["delay_ordering"]["cases"] += 1
        checks["delay_ordering"]["failures"] += int(not ok)
    report: dict[str, Any] = {"seed": seed, "trials": trials, "specs": names, "checks": []}
    for k, v in checks.items():
        report["checks"].append({"name": k, "expected": "holds", "status":
                                 "PASS" if v["failures"] == 0 else "FAIL", **v})
    if property_trials > 0:
        tree3 = random_tree(np.random.default_rng(seed), 3)
        props = [
            ("flat AVaR(0.5) recursivity", "fails", check_recursivity(FlatSystem(AVaR(.5)), tree3, 0, 1, 3,
                                                                    property_trials, seed)),
            ("flat expectation recursivity", "holds",
             check_recursivity(FlatSystem(Expectation()), tree3, 0, 1, 3, property_trials, seed)),
            ("nested max-type AVaR(0.5) recursivity", "holds",
             check_recursivity(NestedSystem(MaxType(AVaR(.5))), tree3, 0, 1, 3, property_trials, seed)),
            ("max-type AVaR(0.5) dynamic consistency", "holds",
             check_dynamic_consistency(NestedSystem(MaxType(AVaR(.5))), tree3, property_trials, seed)),
        ]
    else:
        props = []
    for name, expected, rep in props:
        entry = {"name": name, "expected": expected, "status": "PASS" if rep.holds else "FAIL",
                 "cases": rep.cases, "failures": 0 if rep.holds else 1}
        if rep.counterexample is not None:
            entry["counterexample"] = rep.counterexample
        report["checks"].append(entry)
    return report


def cmd_lab(cfg: dict, text: str, path: str, seed: int, out: Path) -> int:
    trials = _pint(cfg, "trials", 100, text, path, 0)
    T = _pint(cfg, "T", 3, text, path, 1)
    names = cfg.get("specs")
    if names is not None:
        bad = [n for n in names if n not in LAB_SPECS]
        if bad:
            raise ConfigError(f"{path}: {_where(text, 'specs')}unknown specs {bad}; "
                              f"choose from {sorted(LAB_SPECS)}")
    report = run_lab(seed, trials, T, names, _pint(cfg, "property_trials", 10 * trials, text, path, 0))
    _write(out, "report.json", json.dumps(report, indent=2) + "\n")
    for c in report["checks"]:
        print(f"{c['status']:4s}  {c['name']} (expected: {c['expected']}, cases: {c['cases']})")
    return EXIT_OK


def cmd_simulate(cfg: dict, text: str, path: str, seed: int, out: Path) -> int:
    model = _build(ModelSpec.from_dict, _need(cfg, "model", path), "model", text, path)
    count = _pint(cfg, "count", 100, text, path, 1)
    disc = None
    if "discretization" in cfg:
        d = cfg["discretization"]
        mode = d.get("mode", "montecarlo")
        N = _pint(d, "N", 2 if mode == "binomial" else 100, text, path, 1)
        disc = _build(lambda _: discretize(model, N, seed=seed, mode=mode,
                                           same_atoms=bool(d.get("same_atoms", False))),
                      None, "discretization", text, path)
    paths = sample_paths(model, count, seed=seed, disc=disc)
    _write(out, "paths.csv", paths.to_csv())
    print(f"wrote {count} paths")
    return EXIT_OK


COMMANDS = {"price": cmd_price, "sddp": cmd_sddp, "lab": cmd_lab, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskstop", description="Risk-averse optimal stopping tools.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--threads", type=int, default=1,
                       help="worker threads hint (computations here are single threaded)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    path = args.config or "<defaults>"
    try:
        cfg, text = load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"{path}: {_where(text, 'seed')}seed must be a nonnegative integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        print(f"seed = {seed}")
        # overflow or NaN anywhere is a numerical failure, not a silent result
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return COMMANDS[args.command](cfg, text, path, seed, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScalingError, GridCoverageError, TreeTooLarge, FloatingPointError, ArithmeticError,
            np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, RiskSpecError) as e:
        print(f"config error: {path}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
