"""Dual-guided escape from strict local ACOPF solutions.

One outer iteration:

1. solve the ACOPF from the current start and keep the balance duals,
2. minimize the partial Lagrangian built from those duals, from the same start,
3. re-solve the ACOPF warm-started at the Lagrangian minimizer's angles and
   voltages, with generator outputs reset to balance the network there.

The loop continues from the new solution while the cost keeps dropping by
more than a relative 1e-6.  The Lagrangian minimizer is generally not
feasible and is used only as a start point.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .casefile import Network
from .model import (DualSet, PrimalPoint, assemble_acopf, assemble_partial_lagrangian,
                    balanced_dispatch, flat_start)
from .nlp import SolveOptions, minimize

__all__ = [
    "ACOPF_SOLVE", "LAGRANGIAN_SOLVE", "WARM_STARTED_ACOPF_SOLVE",
    "CONVERGED", "MAX_OUTER_ITERS", "SOLVER_FAILURE", "NO_IMPROVEMENT_RTOL",
    "StageRecord", "EscapeTrace", "BatchSummary", "run", "multi_run", "random_inits",
    "summarize", "trace_summary", "write_summary_json", "write_trace_csv",
]

ACOPF_SOLVE = "AcopfSolve"
LAGRANGIAN_SOLVE = "LagrangianSolve"
WARM_STARTED_ACOPF_SOLVE = "WarmStartedAcopfSolve"

CONVERGED = "Converged(NoImprovement)"
MAX_OUTER_ITERS = "MaxOuterIters"
SOLVER_FAILURE = "SolverFailure"

NO_IMPROVEMENT_RTOL = 1e-6
DEFAULT_ANGLE_RANGE = math.pi / 3


@dataclass
class StageRecord:
    outer_index: int
    stage: str
    cost: float  # generation cost at the stage's primal point
    objective: float  # objective of the problem solved at this stage
    primal: PrimalPoint
    duals: DualSet
    status: str
    kkt_residual: float
    iterations: int
    wall_ms: float


@dataclass
class EscapeTrace:
    iterations: list = field(default_factory=list)
    final_status: str = ""
    best: Optional[StageRecord] = None
    best_outer: int = -1  # outer index at which ``best`` was first reached

    def acopf_costs(self) -> list:
        """Best feasible cost after each outer iteration; entry 0 is the direct solve."""
        out = []
        current = math.inf
        for rec in self.iterations:
            if rec.stage == LAGRANGIAN_SOLVE or rec.status != "LocalOptimal":
                continue
            current = min(current, rec.cost)
            if rec.stage == ACOPF_SOLVE and rec.outer_index == 1:
                out.append(current)
            elif rec.stage == WARM_STARTED_ACOPF_SOLVE:
                out.append(current)
        return out

    @property
    def outer_iterations(self) -> int:
        return max((r.outer_index for r in self.iterations), default=0)


def _duals_from(net: Network, out) -> DualSet:
    nb = net.n_bus
    return DualSet(mu_p=out.eq_duals[:nb].copy(), mu_q=out.eq_duals[nb:2 * nb].copy(),
                   bound_duals=out.bound_duals.copy(), flow_duals=out.ineq_duals.copy())


def _solve_stage(net, problem, layout, x0, opts, outer, stage):
    t0 = time.perf_counter()
    out = minimize(problem, x0, opts)
    wall = 1e3 * (time.perf_counter() - t0)
    primal = layout.unpack(out.primal).wrapped()
    if stage == LAGRANGIAN_SOLVE:
        duals = DualSet(mu_p=np.zeros(net.n_bus), mu_q=np.zeros(net.n_bus),
                        bound_duals=out.bound_duals.copy(), flow_duals=out.ineq_duals.copy())
    else:
        duals = _duals_from(net, out)
    cost = float(sum(g.cost_at(p) for g, p in zip(net.gens, primal.pg)))
    rec = StageRecord(outer_index=outer, stage=stage, cost=cost, objective=out.objective,
                      primal=primal, duals=duals, status=str(out.status),
                      kkt_residual=out.kkt_residual, iterations=out.iterations, wall_ms=wall)
    return rec, out


def run(net: Network, init: Optional[PrimalPoint] = None, max_outer: int = 10,
        opts: Optional[SolveOptions] = None) -> EscapeTrace:
    """Run the escape loop from ``init`` (flat start if omitted)."""
    if max_outer < 1:
        raise ValueError("max_outer must be at least 1")
    opts = opts or SolveOptions()
    init = flat_start(net) if init is None else init
    if abs(float(init.theta[net.ref_bus])) > 0.0:
        raise ValueError("init must hold the reference angle at 0")
    acopf = assemble_acopf(net)
    layout = acopf.meta["layout"]
    trace = EscapeTrace()

    def note_best(rec):
        if rec.status != "LocalOptimal":
            return
        if trace.best is None or rec.cost < trace.best.cost - NO_IMPROVEMENT_RTOL * abs(trace.best.cost):
            trace.best, trace.best_outer = rec, rec.outer_index

    x_init = layout.pack(init)
    for outer in range(1, max_outer + 1):
        direct, out_a = _solve_stage(net, acopf, layout, x_init, opts, outer, ACOPF_SOLVE)
        trace.iterations.append(direct)
        if not out_a.ok:
            trace.final_status = SOLVER_FAILURE
            return trace
        note_best(direct)

        lagr = assemble_partial_lagrangian(net, direct.duals)
        relaxed, out_b = _solve_stage(net, lagr, layout, x_init, opts, outer, LAGRANGIAN_SOLVE)
        trace.iterations.append(relaxed)
        if out_b.status.value in ("NumericFailure", "Infeasible"):
            trace.final_status = SOLVER_FAILURE
            return trace

        # the minimizer fixes the network state; generator outputs in the
        # relaxed problem are pushed to arbitrary bounds, so rebalance them
        start = balanced_dispatch(net, relaxed.primal.theta, relaxed.primal.v)
        warm, out_c = _solve_stage(net, acopf, layout, layout.pack(start), opts, outer,
                                   WARM_STARTED_ACOPF_SOLVE)
        trace.iterations.append(warm)
        if not out_c.ok:
            trace.final_status = SOLVER_FAILURE
            return trace
        note_best(warm)

        if not warm.cost < direct.cost - NO_IMPROVEMENT_RTOL * abs(direct.cost):
            trace.final_status = CONVERGED
            return trace
        x_init = out_c.primal
    trace.final_status = MAX_OUTER_ITERS
    return trace


def random_inits(net: Network, count: int, seed: int,
                 angle_range: float = DEFAULT_ANGLE_RANGE) -> list:
    """Start points drawn uniformly within the variable bounds.

    Angles carry no bounds in the model, so non-reference angles are drawn
    from ``[-angle_range, angle_range]``; the reference angle stays at 0.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    nb = net.n_bus
    v_lo = np.array([b.v_min for b in net.buses])
    v_hi = np.array([b.v_max for b in net.buses])
    p_lo = np.array([g.p_min for g in net.gens])
    p_hi = np.array([g.p_max for g in net.gens])
    q_lo = np.array([g.q_min for g in net.gens])
    q_hi = np.array([g.q_max for g in net.gens])
    out = []
    for _ in range(count):
        theta = rng.uniform(-angle_range, angle_range, nb)
        theta[net.ref_bus] = 0.0
        out.append(PrimalPoint(theta=theta, v=rng.uniform(v_lo, v_hi),
                               pg=rng.uniform(p_lo, p_hi), qg=rng.uniform(q_lo, q_hi)))
    return out


@dataclass
class BatchSummary:
    best_cost: float
    fraction_at_best: list  # per outer iteration, index 0 = direct solve
    mean_normalized_cost: list
    n_traces: int
    n_failed: int  # traces whose direct solve failed; excluded from the series
    final_statuses: dict

    def to_dict(self) -> dict:
        return {"best_cost": self.best_cost, "fraction_at_best": self.fraction_at_best,
                "mean_normalized_cost": self.mean_normalized_cost, "n_traces": self.n_traces,
                "n_failed": self.n_failed, "final_statuses": self.final_statuses}


def _run_one(args):
    net, init, max_outer, opts = args
    return run(net, init, max_outer, opts)


def summarize(traces: Sequence[EscapeTrace], reference_cost: Optional[float] = None,
              rtol: float = NO_IMPROVEMENT_RTOL) -> BatchSummary:
    """Per-iteration statistics over traces; costs carry forward after a trace stops."""
    series = [t.acopf_costs() for t in traces]
    usable = [s for s in series if s]
    statuses: dict = {}
    for t in traces:
        statuses[t.final_status] = statuses.get(t.final_status, 0) + 1
    candidates = [min(s) for s in usable]
    if reference_cost is not None:
        candidates.append(reference_cost)
    if not candidates:
        return BatchSummary(math.inf, [], [], len(traces), len(traces), statuses)
    best = min(candidates)
    depth = max(len(s) for s in usable) if usable else 0
    frac, mean = [], []
    for k in range(depth):
        costs = np.array([s[min(k, len(s) - 1)] for s in usable])
        frac.append(float(np.mean(costs <= best + rtol * abs(best))))
        mean.append(float(np.mean(costs / best)) if best != 0 else float(np.mean(costs - best) + 1))
    return BatchSummary(best, frac, mean, len(traces), len(traces) - len(usable), statuses)


def multi_run(net: Network, inits: Sequence[PrimalPoint], max_outer: int = 10,
              opts: Optional[SolveOptions] = None, jobs: int = 1,
              reference_cost: Optional[float] = None):
    """Run the loop from every start; returns (traces, BatchSummary).

    ``reference_cost`` (e.g. from the enumeration oracle) joins the traces'
    costs when the best cost is decided.  Traces are returned in input order.
    """
    if not inits:
        raise ValueError("inits must be nonempty")
    opts = opts or SolveOptions()
    work = [(net, init, max_outer, opts) for init in inits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(_run_one, work))
    else:
        traces = [_run_one(w) for w in work]
    return traces, summarize(traces, reference_cost)


def write_trace_csv(trace: EscapeTrace, path, include_timing: bool = True,
                    preamble: Optional[dict] = None) -> None:
    """One row per stage: outer, stage, status, cost, kkt_residual[, wall_ms].

    ``preamble`` entries are written first as ``# key,value`` lines.
    """
    with open(path, "w", newline="") as fh:
        for key, val in sorted((preamble or {}).items()):
            fh.write(f"# {key},{val}\n")
        w = csv.writer(fh)
        head = ["outer", "stage", "status", "cost", "kkt_residual"]
        w.writerow(head + (["wall_ms"] if include_timing else []))
        for r in trace.iterations:
            row = [r.outer_index, r.stage, r.status, repr(r.cost), repr(r.kkt_residual)]
            if include_timing:
                row.append(f"{r.wall_ms:.3f}")
            w.writerow(row)


def trace_summary(trace: EscapeTrace) -> dict:
    best = trace.best
    return {
        "final_status": trace.final_status,
        "outer_iterations": trace.outer_iterations,
        "best_cost": None if best is None else best.cost,
        "iterations_to_best": trace.best_outer if best is not None else None,
        "best_primal": None if best is None else best.primal.to_dict(),
        "best_duals": None if best is None else best.duals.to_dict(),
    }


def write_summary_json(trace: EscapeTrace, path, extra: Optional[dict] = None) -> None:
    doc = trace_summary(trace)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
