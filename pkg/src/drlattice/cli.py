"""Command line front end: ``drlattice {solve,price,verify,oracle}``.

Exit codes: 0 success, 2 configuration error, 3 oracle cap exceeded,
4 property failure.  Results are assembled in memory and written only once
the whole run has succeeded, each file through a temporary name and an
atomic rename.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .drbsde import ObstacleError, decompose_supermartingale, solve_drbsde_reflected
from .dynkin import GamePayoff, dynkin_bruteforce, dynkin_value_iteration, minmax_exchange, uncertain_game_values
from .lattice import LatticeError, OracleCapExceeded
from .options import GameOptionSpec, exercise_boundary, price_game_option
from .second_order import (
    JordanDecompositionError, check_minimum_condition, check_representation, decompose_v,
    solve_2drbsde, solve_2drbsde_lower, v_process,
)
from .verification import PROPERTIES, is_running_type, run_suite, summarize

EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_PROPERTY = 0, 2, 3, 4

SOLUTION_COLUMNS = ("slice", "state_index", "state", "Y", "Z", "argmax_vol",
                    "v", "v_plus", "k_plus", "dk_minus")


def fmt(x) -> str:
    """17 significant digits; integers and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _encode(obj, indent: int = 0) -> str:
    """JSON text with every float written to 17 significant digits.

    ``json.dumps`` would print the shortest round-trip form instead.
    Non-finite floats become strings.
    """
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return format(f, ".17g") if np.isfinite(f) else json.dumps(format(f, ".17g"))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def dump_json(obj) -> str:
    return _encode(obj) + "\n"


def dump_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def emit(out_dir: Path, files: dict[str, str]) -> None:
    """Write every file or none: stage them all, then rename into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, content in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(content)
            staged.append((tmp, out_dir / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)


def _model_summary(cfg: RunConfig) -> dict:
    lat = cfg.lattice
    return {"horizon": lat.horizon, "steps": lat.steps, "x0": lat.x0, "dx": lat.dx,
            "vol_levels": list(cfg.grid.levels), "stretch": lat.stretch}


def run_solve(cfg: RunConfig) -> tuple[dict[str, str], int]:
    lat, grid = cfg.lattice, cfg.grid
    sol = solve_2drbsde(lat, grid, cfg.driver, cfg.terminal, cfg.obstacles, cfg.scheme)
    st = sol.argmax_strategy()
    ledger = v_process(lat, st, sol, cfg.driver)
    comp = solve_drbsde_reflected(lat, st, cfg.driver, cfg.terminal, cfg.obstacles, cfg.scheme)
    jordan = {"ok": True, "message": ""}
    try:
        full = decompose_v(ledger, comp, cfg.obstacles, tol=cfg.tolerances["jordan"])
        v_plus, k_plus = full.v_plus, full.k_plus
    except JordanDecompositionError as exc:
        jordan = {"ok": False, "message": str(exc)}
        v_plus = k_plus = [np.full_like(v, np.nan) for v in ledger.v]
    rows = []
    for i in range(lat.steps + 1):
        x = lat.states(i)
        for j in range(lat.slice_size(i)):
            if i == lat.steps:
                rows.append((i, j, x[j], sol.Y[i][j], "", "", "", "", "", ""))
                continue
            level = int(np.flatnonzero(lat.grid_indices(grid) == sol.argmax_vol[i][j])[0])
            rows.append((i, j, x[j], sol.Y[i][j], sol.Z[i][j], level, ledger.v[i][j],
                         v_plus[i][j], k_plus[i][j], comp.dk_minus[i][j]))
    summary = {
        "mode": "solve", "model": _model_summary(cfg), "Y0": sol.y0, "Z0": sol.Z[0][0],
        "argmax_vol_root": int(np.flatnonzero(lat.grid_indices(grid) == sol.argmax_vol[0][0])[0]),
        "ledger_strategy": "argmax", "jordan": jordan,
        "z_spread_max": max(float(np.max(s)) for s in sol.z_spread),
        "seed": cfg.seed,
    }
    return {"solution.csv": dump_csv(SOLUTION_COLUMNS, rows), "summary.json": dump_json(summary)}, EXIT_OK


def run_price(cfg: RunConfig) -> tuple[dict[str, str], int]:
    lat, grid = cfg.lattice, cfg.grid
    if cfg.penalty is None:
        raise ConfigError(cfg.path, 1, "problem", "price mode needs a finite upper obstacle or a penalty")
    spec = GameOptionSpec(cfg.obstacles.lower, cfg.penalty, cfg.terminal, cfg.driver)
    interval = price_game_option(lat, grid, spec, cfg.scheme)
    hi, lo = interval.upper_solution, interval.lower_solution
    st = hi.argmax_strategy()
    y_arg = solve_drbsde_reflected(lat, st, cfg.driver, cfg.terminal, cfg.obstacles, cfg.scheme).y
    table = exercise_boundary(lat, hi.Y, [y_arg], spec, cfg.epsilon)
    curves = []
    for i in range(lat.steps + 1):
        x = lat.states(i)
        for j in range(lat.slice_size(i)):
            last = i == lat.steps
            curves.append((i, j, x[j], lo.Y[i][j], hi.Y[i][j],
                           "" if last else lo.Z[i][j], "" if last else hi.Z[i][j]))
    bounds = []
    for row in table:
        bounds += [(row.slice, row.time, "buyer_exercise", s) for s in row.buyer_states]
        bounds += [(row.slice, row.time, "seller_cancel", s) for s in row.seller_states[0]]
    summary = {
        "mode": "price", "model": _model_summary(cfg), "sub_price": interval.sub_price,
        "super_price": interval.super_price, "width": interval.width,
        "super_price_label": "superhedging upper bound", "epsilon": cfg.epsilon,
        "seller_boundary_strategy": "argmax", "seed": cfg.seed,
    }
    return {
        "price.json": dump_json(summary),
        "curves.csv": dump_csv(("slice", "state_index", "state", "sub", "super", "hedge_sub",
                                "hedge_super"), curves),
        "boundary.csv": dump_csv(("slice", "time", "role", "state"), bounds),
    }, EXIT_OK


def run_verify(cfg: RunConfig) -> tuple[dict[str, str], int]:
    props = cfg.properties or PROPERTIES
    results = run_suite(cfg.lattice, cfg.grid, cfg.seed, cfg.instances, cfg.cap,
                        cfg.tolerances, props)
    summaries = summarize(results, props)
    rows = [(r.prop, r.index, f"{r.seed[0]}:{r.seed[1]}:{r.seed[2]}", r.deviation, r.tol,
             r.passed, r.detail) for r in results]
    report = {
        "mode": "verify", "model": _model_summary(cfg), "seed": cfg.seed,
        "instances_per_property": cfg.instances,
        "properties": [{"name": s.name, "instances": s.instances, "failures": s.failures,
                        "max_deviation": s.max_deviation, "tol": s.tol,
                        "informational": s.informational, "passed": s.passed}
                       for s in summaries],
        "passed": all(s.passed for s in summaries),
    }
    files = {"verify.json": dump_json(report),
             "verify.csv": dump_csv(("property", "instance", "seed", "deviation", "tol",
                                     "passed", "detail"), rows)}
    return files, EXIT_OK if report["passed"] else EXIT_PROPERTY


def run_oracle(cfg: RunConfig) -> tuple[dict[str, str], int]:
    lat, grid, cap = cfg.lattice, cfg.grid, cfg.cap
    n_strat = len(grid) ** lat.n_nonterminal
    if n_strat > cap:
        raise OracleCapExceeded(f"{len(grid)}^{lat.n_nonterminal} = {n_strat} strategies exceed the cap {cap}")
    args = (lat, grid, cfg.driver, cfg.terminal, cfg.obstacles)
    sol = solve_2drbsde(*args, scheme=cfg.scheme)
    lower = solve_2drbsde_lower(*args, scheme=cfg.scheme)
    checks = {
        "representation": check_representation(lat, grid, sol, cfg.driver, cfg.obstacles, cap).max_deviation,
        "representation_one_step": max(
            check_representation(lat, grid, sol, cfg.driver, cfg.obstacles, cap, t, t + 1).max_deviation
            for t in range(lat.steps)),
        "representation_lower": check_representation(lat, grid, lower, cfg.driver, cfg.obstacles,
                                                     cap).max_deviation,
    }
    st = sol.argmax_strategy()
    comp = solve_drbsde_reflected(lat, st, cfg.driver, cfg.terminal, cfg.obstacles, cfg.scheme)
    checks["doob_meyer_exact_V"] = max(float(np.max(np.abs(v))) for v in decompose_supermartingale(
        lat, st, cfg.driver, comp.y, cfg.obstacles, scheme=cfg.scheme).V)
    skipped = []
    linearizable = cfg.scheme == "explicit"
    if is_running_type(cfg.driver) or linearizable:
        measure = "plain" if is_running_type(cfg.driver) else "linearized"
        checks["minimum_condition"] = max(
            check_minimum_condition(lat, grid, sol, cfg.driver, cfg.obstacles, t, cap,
                                    measure=measure).max_gap
            for t in range(lat.steps))
    else:
        skipped.append("minimum condition: implicit scheme with a (y, z)-dependent driver")
    # the game payoff takes a running reward in (t, x) only
    if cfg.driver.name in ("zero", "running"):
        d = cfg.driver
        payoff = GamePayoff(lambda t, x: d(t, x, 0.0, 0.0, 0.0), cfg.obstacles.lower,
                            cfg.obstacles.upper, cfg.terminal)
        games = uncertain_game_values(lat, grid, payoff, cap)
        checks["uncertain_upper_vs_Y"] = abs(games.upper[0][0] - sol.y0)
        checks["uncertain_lower_vs_lower"] = abs(games.lower[0][0] - lower.y0)
        if 4 ** lat.n_nonterminal <= cap:
            bf = dynkin_bruteforce(lat, st, payoff, cap)
            checks["dynkin_bruteforce_vs_iteration"] = abs(
                bf.infsup - dynkin_value_iteration(lat, st, payoff)[0][0])
            checks["dynkin_saddle_gap"] = bf.saddle_gap
            mm = minmax_exchange(lat, grid, payoff, cap)
            checks["minmax_exchange_gap"] = mm.exchange_gap
        else:
            skipped.append("dynkin brute force: rule pairs exceed the cap")
    else:
        skipped.append("game checks need a zero or running-reward driver")
    report = {"mode": "oracle", "model": _model_summary(cfg), "seed": cfg.seed,
              "strategies": n_strat, "Y0": sol.y0, "lower_Y0": lower.y0,
              "max_deviation": checks, "skipped": skipped}
    return {"oracle.json": dump_json(report)}, EXIT_OK


COMMANDS = {"solve": run_solve, "price": run_price, "verify": run_verify, "oracle": run_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlattice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--cap", type=int, default=None, help="enumeration cap for oracles")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(f"error: --seed must be a u64, got {args.seed}", file=sys.stderr)
        return EXIT_CONFIG
    if args.cap is not None and args.cap < 1:
        print(f"error: --cap must be >= 1, got {args.cap}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.config, seed=args.seed, cap=args.cap)
        files, code = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LatticeError, ObstacleError) as exc:
        print(f"config error: {args.config}:1: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleCapExceeded as exc:
        print(f"oracle cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    emit(Path(args.out), files)
    for name in sorted(files):
        print(Path(args.out) / name)
    return code


if __name__ == "__main__":
    sys.exit(main())
