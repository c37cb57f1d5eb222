"""Command-line front end: ``acopf-escape <command> [options]``.

Commands: ``solve``, ``escape``, ``enumerate``, ``verify-theory``, ``landscape``.

Exit codes: 0 success, 1 usage error, 2 unreadable or invalid input,
3 numerical failure (solver failure or a failed theory check).

Every artifact carries the tool version and a hash of the result-relevant
configuration.  Artifacts are byte-identical across runs with the same
configuration; wall-clock data goes to ``run_meta.json`` only.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, cases, escape, oracle
from .casefile import CaseFormatError, Network, from_json, load_case, validate
from .model import assemble_acopf, flat_start, total_cost
from .nlp import SolveOptions, minimize

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "ACOPF_ESCAPE_OUT"
# options that do not change results and stay out of the config hash
_UNHASHED = {"out", "jobs", "func"}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers

def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _stamp(args) -> dict:
    cfg = _config(args)
    return {"tool_version": __version__, "config_hash": config_hash(cfg), "config": cfg}


def _csv_stamp(args) -> dict:
    stamp = _stamp(args)
    return {"tool_version": stamp["tool_version"], "config_hash": stamp["config_hash"],
            "seed": getattr(args, "seed", None)}


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_network(args) -> Network:
    try:
        if str(args.case).endswith(".json"):
            net = from_json(Path(args.case).read_text())
        else:
            net = load_case(args.case)
    except (CaseFormatError, OSError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from None
    problems = [p for p in validate(net) if not p.startswith("warning")]
    if problems:
        raise InputError("invalid network: " + "; ".join(problems))
    if getattr(args, "fix_voltages", False):
        net = cases.fix_voltages(net)
    return net


def _start_point(net: Network, start: str):
    """``flat`` or a number: every non-reference bus lags the reference by that angle."""
    p = flat_start(net)
    if start == "flat":
        return p
    try:
        lag = float(start)
    except ValueError:
        raise UsageError(f"--start must be 'flat' or an angle in radians, not {start!r}") from None
    if not math.isfinite(lag):
        raise UsageError("--start must be finite")
    p.theta[:] = -lag
    p.theta[net.ref_bus] = 0.0
    return p


def _opts(args) -> SolveOptions:
    if not args.tol > 0:
        raise UsageError("--tol must be positive")
    return SolveOptions(tol=args.tol)


def _write_meta(out: Path, args, started: float, extra: dict | None = None) -> None:
    meta = {"tool_version": __version__, "config_hash": config_hash(_config(args)),
            "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "wall_seconds": time.time() - started}
    if extra:
        meta.update(extra)
    _write_json(out / "run_meta.json", meta)


# --------------------------------------------------------------------------
# commands

def cmd_solve(args) -> int:
    started = time.time()
    net = _load_network(args)
    opts = _opts(args)
    problem = assemble_acopf(net)
    layout = problem.meta["layout"]
    x0 = layout.pack(_start_point(net, args.start))
    out = minimize(problem, x0, opts)
    primal = layout.unpack(out.primal)
    nb = net.n_bus
    doc = {**_stamp(args), "case": net.name, "status": out.status.value,
           "cost": total_cost(net, primal.pg), "objective": out.objective,
           "kkt_residual": out.kkt_residual, "iterations": out.iterations,
           "primal": primal.to_dict(),
           "duals": {"mu_p": out.eq_duals[:nb], "mu_q": out.eq_duals[nb:2 * nb],
                     "bound_duals": out.bound_duals, "flow_duals": out.ineq_duals}}
    dest = _out_dir(args)
    _write_json(dest / "solve.json", doc)
    _write_meta(dest, args, started)
    print(f"{out.status.value}  cost={doc['cost']:.10g}  kkt={out.kkt_residual:.3g}")
    return EXIT_OK if out.ok else EXIT_NUMERIC


def cmd_escape(args) -> int:
    started = time.time()
    if args.starts < 1:
        raise UsageError("--starts must be at least 1")
    if args.max_outer < 1:
        raise UsageError("--max-outer must be at least 1")
    net = _load_network(args)
    opts = _opts(args)
    dest = _out_dir(args)
    stamp = _stamp(args)
    if args.starts == 1:
        inits = [_start_point(net, args.start)]
    else:
        inits = escape.random_inits(net, args.starts, args.seed, args.angle_range)
    traces, summary = escape.multi_run(net, inits, args.max_outer, opts, jobs=args.jobs)
    pre = _csv_stamp(args)
    timing = []
    for k, tr in enumerate(traces):
        name = "trace.csv" if len(traces) == 1 else f"trace_{k:04d}.csv"
        escape.write_trace_csv(tr, dest / name, include_timing=False, preamble=pre)
        timing.append([round(r.wall_ms, 3) for r in tr.iterations])
    doc = {**stamp, "case": net.name, "aggregate": summary.to_dict(),
           "traces": [{k: v for k, v in escape.trace_summary(t).items()
                       if k not in ("best_primal", "best_duals")} for t in traces]}
    if len(traces) == 1:
        doc["trace"] = escape.trace_summary(traces[0])
    _write_json(dest / "escape_summary.json", doc)
    _write_meta(dest, args, started, {"stage_wall_ms": timing})
    print(f"traces={summary.n_traces}  failed={summary.n_failed}  best={summary.best_cost:.10g}")
    print("fraction_at_best=" + " ".join(f"{v:.4f}" for v in summary.fraction_at_best))
    print("mean_normalized_cost=" + " ".join(f"{v:.6f}" for v in summary.mean_normalized_cost))
    if all(t.best is None for t in traces):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_enumerate(args) -> int:
    started = time.time()
    if args.starts < 1:
        raise UsageError("--starts must be at least 1")
    net = _load_network(args)
    opts = _opts(args)
    enum = oracle.multistart_enumerate(net, args.starts, args.seed, opts,
                                       angle_range=args.angle_range, jobs=args.jobs)
    dest = _out_dir(args)
    oracle.write_enumeration_csv(enum, dest / "enumeration.csv", preamble=_csv_stamp(args))
    best = enum.costs[0] if enum.clusters else None
    ratios = [c / best for c in enum.costs] if best else []
    oracle.write_witnesses_json(enum, dest / "witnesses.json",
                                {**_stamp(args), "case": net.name, "cost_ratios": ratios})
    _write_meta(dest, args, started)
    print(f"clusters={len(enum.clusters)}  failed={enum.n_failed}/{enum.n_starts}")
    for k, c in enumerate(enum.clusters):
        print(f"  [{k}] cost={c.cost:.10g}  ratio={c.cost / best:.6f}  n={c.occurrences}"
              f"  max_kkt={c.max_kkt:.3g}")
    return EXIT_OK if enum.clusters else EXIT_NUMERIC


def _corrupted(name: str) -> dict:
    """Deliberately wrong closed forms for harness self-tests."""
    table = {
        "lagrangian_curvature_2bus": lambda g, b, t: -analysis.lagrangian_curvature_2bus(g, b, t),
        "transmission_loss": lambda g, t: -analysis.transmission_loss(g, t),
        "minors_2bus_v2_binding": lambda *a: tuple(1.01 * m for m in analysis.minors_2bus_v2_binding(*a)),
        "minors_2bus_v1_binding": lambda *a: tuple(1.01 * m for m in analysis.minors_2bus_v1_binding(*a)),
        "lagrangian_minimizer_2bus": lambda g, b, c, mu: oracle.lagrangian_minimizer_2bus(g, b, c, mu) + math.pi,
    }
    if name not in table:
        raise UsageError(f"--corrupt accepts one of: {', '.join(sorted(table))}")
    return {name: table[name]}


def cmd_verify_theory(args) -> int:
    started = time.time()
    names = args.check or None
    if names:
        unknown = [n for n in names if n not in analysis.CHECKS]
        if unknown:
            raise UsageError(f"unknown check(s): {', '.join(unknown)}; "
                             f"choose from {', '.join(analysis.CHECKS)}")
    if args.case not in (None, "twobus"):
        raise UsageError("theory checks use the built-in small networks; only --case twobus is accepted")
    formulas = _corrupted(args.corrupt) if args.corrupt else None
    results = analysis.run_theory_checks(names, seed=args.seed, formulas=formulas)
    dest = _out_dir(args)
    _write_json(dest / "verify_theory.json",
                {**_stamp(args), "checks": [{"name": r.name, "passed": r.passed,
                                             "detail": r.detail} for r in results]})
    _write_meta(dest, args, started)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_landscape(args) -> int:
    started = time.time()
    net = cases.fix_voltages(_load_network(args))
    base = analysis.ReducedLandscape(net)
    dim = base.dim
    if dim not in (1, 2):
        raise UsageError(f"landscapes need one or two free angles; {net.name} has {dim}")
    lo, hi = args.range if args.range else ((-math.pi / 2, 3 * math.pi / 2) if dim == 1
                                            else (-math.pi, math.pi))
    if not hi > lo:
        raise UsageError("--range must have positive width")
    if not args.step > 0:
        raise UsageError("--step must be positive")
    meta = {"objective": args.objective, "case": net.name}
    if args.objective == "penalized":
        if not args.rho > 0:
            raise UsageError("--rho must be positive")
        land = analysis.ReducedLandscape(net, "penalized", rho=args.rho)
        meta["rho"] = args.rho
    elif args.objective == "lagrangian":
        sols = analysis.reduced_solutions(net)
        pick = {"global": 0, "local": 1}.get(args.mu_from)
        if pick is None:
            try:
                pick = int(args.mu_from)
            except ValueError:
                raise UsageError("--mu-from must be global, local, or a solution index") from None
        if not 0 <= pick < len(sols):
            raise UsageError(f"--mu-from {args.mu_from}: only {len(sols)} solution(s) found")
        lags, cost, mu = sols[pick]
        land = analysis.ReducedLandscape(net, "lagrangian", mu=mu)
        meta.update({"mu": np.asarray(mu).tolist(), "mu_from_lags": np.asarray(lags).tolist(),
                     "mu_from_cost": float(cost)})
    else:
        land = base
    labels = [lab.replace("phi", "lag") for lab in land.problem.labels]
    try:
        axes = [analysis.Axis(lab, lo, hi, args.step, k) for k, lab in enumerate(labels)]
        grid = analysis.landscape_grid(land, axes, vectorized=True, gradient=land.gradient,
                                       hessian=land.hessian, meta=meta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dest = _out_dir(args)
    stamp = _csv_stamp(args)
    grid.write_csv(dest / "landscape.csv", header=stamp)
    grid.write_markers_json(dest / "landscape_markers.json", _stamp(args))
    _write_meta(dest, args, started)
    mins = grid.minima()
    print(f"samples={grid.values.size}  minima={len(mins)}")
    for m in mins:
        print("  at " + ", ".join(f"{v:.6f}" for v in m.primal) + f"  value={m.cost:.10g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acopf-escape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, case_default="twobus", case_required=False):
        p.add_argument("--case", default=None if case_required else case_default,
                       required=case_required,
                       help=f"built-in name ({', '.join(cases.BUILTIN)}) or case file path")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("solve", help="solve the ACOPF once")
    common(p)
    p.add_argument("--start", default="flat", help="'flat' or a uniform angle lag in radians")
    p.add_argument("--fix-voltages", action="store_true", help="pin all voltages to 1 p.u.")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("escape", help="run the partial-Lagrangian escape loop")
    common(p)
    p.add_argument("--start", default="flat")
    p.add_argument("--starts", type=int, default=1, help="random starts (1 = use --start)")
    p.add_argument("--max-outer", type=int, default=10)
    p.add_argument("--angle-range", type=float, default=escape.DEFAULT_ANGLE_RANGE)
    p.add_argument("--fix-voltages", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_escape)

    p = sub.add_parser("enumerate", help="cluster local optima from random starts")
    common(p)
    p.add_argument("--starts", type=int, default=100)
    p.add_argument("--angle-range", type=float, default=escape.DEFAULT_ANGLE_RANGE)
    p.add_argument("--fix-voltages", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("verify-theory", help="run the theory checks")
    p.add_argument("--check", action="append", help="check name (repeatable; default all "
                                                     "except basin)")
    p.add_argument("--case", default=None)
    p.add_argument("--corrupt", default=None, help="replace a closed form by a wrong one (self-test)")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("landscape", help="sample a fixed-voltage objective on a grid")
    common(p)
    p.add_argument("--objective", choices=("penalized", "lagrangian", "cost"), default="penalized")
    p.add_argument("--rho", type=float, default=2.0)
    p.add_argument("--mu-from", default="local", help="global, local, or a solution index")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, RuntimeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
