"""Brute-force ground truth for small instances.

Grid search over reduced coordinates, multistart clustering of full ACOPF
solutions, best-cost certification, and the closed forms of the 2-bus
fixed-voltage problem

    min  P_12(theta)   s.t.  h(theta) = l + g - g cos(theta) - b sin(theta) = 0

where ``theta`` is the angle lag of the load bus.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .analysis import fd_gradient, fd_hessian, hessian_classify
from .casefile import Network
from .model import PrimalPoint, assemble_acopf, balance_residuals, total_cost
from .nlp import SolveOptions, minimize

__all__ = [
    "Certificate", "Cluster", "Enumeration", "InfeasibleLoadError", "StationaryPoint",
    "certify_best", "grid_axes", "grid_search", "lagrangian_minimizer_2bus",
    "multistart_enumerate", "mu_of_theta_2bus", "two_bus_roots", "write_enumeration_csv",
    "write_witnesses_json",
]

MAX_SAMPLES = 10**8
MERGE_RADIUS = 1e-3
TWO_PI = 2 * math.pi


@dataclass
class StationaryPoint:
    primal: np.ndarray
    cost: float
    grad_norm: float
    hessian_class: str
    basin_tag: Optional[str] = None

    def to_dict(self) -> dict:
        return {"primal": np.asarray(self.primal).tolist(), "cost": self.cost,
                "grad_norm": self.grad_norm, "hessian_class": self.hessian_class,
                "basin_tag": self.basin_tag}


# --------------------------------------------------------------------------
# grid search

def grid_axes(box: Sequence[tuple[float, float]], step: float, endpoint: bool = True) -> list:
    """Sample coordinates per axis, from the lower end in increments of ``step``.

    With ``endpoint=False`` the upper end is left out (periodic axes).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    axes = []
    for lo, hi in box:
        if not hi > lo:
            raise ValueError(f"empty axis range [{lo}, {hi}]")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        if not endpoint and lo + step * (n - 1) >= hi - 1e-12 * max(1.0, abs(hi)):
            n -= 1
        axes.append(lo + step * np.arange(n))
    total = math.prod(len(a) for a in axes)
    if total > MAX_SAMPLES:
        raise ValueError(f"grid would need {total} samples (limit {MAX_SAMPLES})")
    return axes


def sample_grid(objective: Callable, axes: list, vectorized: bool = False) -> np.ndarray:
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    flat = mesh.reshape(-1, len(axes))
    if vectorized:
        vals = np.asarray(objective(flat), dtype=float)
    else:
        vals = np.array([objective(x) for x in flat], dtype=float)
    return vals.reshape(mesh.shape[:-1])


def grid_minima(values: np.ndarray, periodic: bool = False) -> list:
    """Indices of cells no larger than any neighbour and smaller than at least one.

    Without ``periodic``, cells on the box edge are skipped since their
    neighbourhood is incomplete.
    """
    d = values.ndim
    le = np.ones(values.shape, dtype=bool)
    lt = np.zeros(values.shape, dtype=bool)
    if periodic:
        for shift in itertools.product((-1, 0, 1), repeat=d):
            if not any(shift):
                continue
            other = np.roll(values, shift, axis=tuple(range(d)))
            le &= values <= other
            lt |= values < other
        return [tuple(int(k) for k in ix) for ix in zip(*np.nonzero(le & lt))]
    inner = tuple(slice(1, n - 1) for n in values.shape)
    core = values[inner]
    le = np.ones(core.shape, dtype=bool)
    lt = np.zeros(core.shape, dtype=bool)
    for shift in itertools.product((-1, 0, 1), repeat=d):
        if not any(shift):
            continue
        sl = tuple(slice(1 + s, n - 1 + s) for s, n in zip(shift, values.shape))
        other = values[sl]
        le &= core <= other
        lt |= core < other
    return [tuple(int(k) + 1 for k in ix) for ix in zip(*np.nonzero(le & lt))]


def _wrap_into(x, box):
    out = np.array(x, dtype=float)
    for k, (lo, hi) in enumerate(box):
        width = hi - lo
        out[k] = lo + (out[k] - lo) % width
    return out


def _merge(points: list, radius: float, period: Optional[float]) -> list:
    kept: list = []
    for p in sorted(points, key=lambda s: (s.cost, tuple(s.primal))):
        dup = False
        for q in kept:
            diff = np.abs(p.primal - q.primal)
            if period is not None:
                diff = np.minimum(diff, period - diff)
            if np.max(diff) <= radius:
                dup = True
                break
        if not dup:
            kept.append(p)
    return kept


def grid_search(objective: Callable, box: Sequence[tuple[float, float]], step: float, *,
                gradient: Optional[Callable] = None, hessian: Optional[Callable] = None,
                vectorized: bool = False, periodic: bool = False,
                merge_radius: float = MERGE_RADIUS, grad_tol: float = 1e-6,
                values: Optional[np.ndarray] = None) -> list:
    """Local minimizers of ``objective`` over ``box`` found by sampling and polishing.

    The box is sampled at ``step``; every cell that is a discrete local
    minimum seeds a local descent.  Polished points are merged when their
    infinity distance is below ``merge_radius`` and returned sorted by cost.
    With ``periodic`` the axes wrap around (the box width is the period).
    ``values`` may carry samples already computed on the same grid.
    """
    box = [(float(lo), float(hi)) for lo, hi in box]
    if not 1 <= len(box) <= 3:
        raise ValueError("grid_search supports 1 to 3 dimensions")
    axes = grid_axes(box, step, endpoint=not periodic)
    if values is None:
        values = sample_grid(objective, axes, vectorized)

    def f(x):
        x = np.asarray(x, dtype=float)
        return float(objective(x[None, :])[0]) if vectorized else float(objective(x))

    grad = gradient or (lambda x: fd_gradient(f, x))
    hess = hessian or (lambda x: fd_hessian(f, x))
    found = []
    for ix in grid_minima(values, periodic):
        x0 = np.array([axes[k][i] for k, i in enumerate(ix)])
        res = optimize.minimize(f, x0, jac=grad, hess=hess, method="trust-exact",
                                options={"gtol": 1e-12, "maxiter": 200})
        x = res.x
        if periodic:
            x = _wrap_into(x, box)
        elif any(not lo <= xi <= hi for xi, (lo, hi) in zip(x, box)):
            continue  # descended out of the box
        gnorm = float(np.max(np.abs(grad(x))))
        if gnorm > grad_tol:
            continue
        report = hessian_classify(hess(x))
        found.append(StationaryPoint(x, f(x), gnorm, report.hessian_class))
    period = box[0][1] - box[0][0] if periodic else None
    return _merge(found, merge_radius, period)


# --------------------------------------------------------------------------
# multistart enumeration of full ACOPF solutions

@dataclass
class Cluster:
    primal: PrimalPoint
    cost: float
    occurrences: int
    max_kkt: float
    eq_duals: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


@dataclass
class Enumeration:
    clusters: list
    n_starts: int
    n_failed: int
    seed: Optional[int] = None

    @property
    def costs(self) -> list:
        return [c.cost for c in self.clusters]


def _angle_gap(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % TWO_PI
    return np.minimum(d, TWO_PI - d)


def _distance(p: PrimalPoint, q: PrimalPoint) -> float:
    return float(max(np.max(_angle_gap(p.theta, q.theta)), np.max(np.abs(p.v - q.v))))


def cluster_solutions(solutions: Sequence[tuple], radius: float = MERGE_RADIUS) -> list:
    """Group (primal, cost, kkt, eq_duals) tuples by infinity distance on (V, theta mod 2 pi)."""
    clusters: list = []
    for primal, cost, kkt, duals in solutions:
        for c in clusters:
            if _distance(c.primal, primal) <= radius:
                c.occurrences += 1
                c.max_kkt = max(c.max_kkt, kkt)
                if cost < c.cost:
                    c.primal, c.cost, c.eq_duals = primal, cost, duals
                break
        else:
            clusters.append(Cluster(primal, cost, 1, kkt, duals))
    clusters.sort(key=lambda c: (c.cost, tuple(np.round(c.primal.theta, 9)),
                                 tuple(np.round(c.primal.v, 9))))
    return clusters


def _solve_from(args):
    net, x0, opts = args
    problem = assemble_acopf(net)
    layout = problem.meta["layout"]
    out = minimize(problem, x0, opts)
    if not out.ok:
        return None
    primal = layout.unpack(out.primal).wrapped()
    return primal, total_cost(net, primal.pg), out.kkt_residual, out.eq_duals


def multistart_enumerate(net: Network, n_starts: int, seed: int,
                         opts: Optional[SolveOptions] = None, *, inits: Optional[list] = None,
                         angle_range: Optional[float] = None, jobs: int = 1,
                         radius: float = MERGE_RADIUS) -> Enumeration:
    """Solve the ACOPF from uniform random starts and cluster the local optima.

    Clusters are sorted by cost; failed solves are only counted.
    """
    from .escape import DEFAULT_ANGLE_RANGE, random_inits

    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    opts = opts or SolveOptions()
    if inits is None:
        inits = random_inits(net, n_starts, seed,
                             DEFAULT_ANGLE_RANGE if angle_range is None else angle_range)
    layout = assemble_acopf(net).meta["layout"]
    work = [(net, layout.pack(p), opts) for p in inits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_from, work))
    else:
        results = [_solve_from(w) for w in work]
    ok = [r for r in results if r is not None]
    return Enumeration(cluster_solutions(ok, radius), len(work), len(work) - len(ok), seed)


def write_enumeration_csv(enum: Enumeration, path, preamble: Optional[dict] = None) -> None:
    with open(path, "w", newline="") as fh:
        for key, val in sorted((preamble or {}).items()):
            fh.write(f"# {key},{val}\n")
        w = csv.writer(fh)
        w.writerow(["cluster", "cost", "occurrences", "max_kkt_residual"])
        for k, c in enumerate(enum.clusters):
            w.writerow([k, repr(c.cost), c.occurrences, repr(c.max_kkt)])


def write_witnesses_json(enum: Enumeration, path, extra: Optional[dict] = None) -> None:
    doc = {
        "n_starts": enum.n_starts, "n_failed": enum.n_failed, "seed": enum.seed,
        "clusters": [{"cluster": k, "cost": c.cost, "occurrences": c.occurrences,
                      "max_kkt_residual": c.max_kkt, "primal": c.primal.to_dict()}
                     for k, c in enumerate(enum.clusters)],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# 2-bus closed forms

class InfeasibleLoadError(ValueError):
    def __init__(self, margin: float):
        super().__init__(f"load exceeds the line's transfer limit by {margin:.6g} p.u.")
        self.margin = margin


def two_bus_roots(g: float, b: float, l: float) -> tuple[float, float]:
    """Both roots of ``h`` on (-pi/2, 3 pi/2), by bisection.

    ``h`` falls on ``(-pi/2, atan(b/g))`` and rises on
    ``(atan(b/g), atan(b/g) + pi)``, so each interval brackets one root.
    """
    def h(t):
        return l + g - g * math.cos(t) - b * math.sin(t)

    ridge = math.atan2(b, g)
    h_min = h(ridge)
    if h_min > 0:
        raise InfeasibleLoadError(h_min)
    if h_min == 0:
        return ridge, ridge
    xtol = 4 * np.finfo(float).eps
    star = 0.0 if h(0.0) == 0 else optimize.bisect(h, -math.pi / 2, ridge, xtol=xtol)
    bar = optimize.bisect(h, ridge, ridge + math.pi, xtol=xtol)
    return star, bar


def mu_of_theta_2bus(g: float, b: float, theta: float) -> float:
    """Balance multiplier that makes ``theta`` stationary for the partial Lagrangian (unit marginal cost)."""
    s, c = math.sin(theta), math.cos(theta)
    den = g * s - b * c
    if den == 0:
        raise ValueError("theta sits on the ridge atan(b/g); multiplier undefined")
    return -(g * s + b * c) / den


def lagrangian_minimizer_2bus(g: float, b: float, c_prime: float, mu: float) -> float:
    """Minimizer of ``c' P_12(theta) + mu h(theta)`` over one period.

    Stationary points satisfy ``tan(theta) = ((mu - c')/(mu + c')) b/g``.  For
    ``mu + c' > 0`` the principal branch is the minimum and lies in
    ``(-pi/2, atan(b/g))``.  For ``mu + c' < 0`` the principal branch is the
    maximum, and the minimum is half a period earlier, in
    ``(atan(b/g) - pi, -pi/2)``.
    """
    if mu + c_prime == 0:
        raise ValueError("mu + c' = 0: the partial Lagrangian has no isolated minimizer")
    principal = math.atan((mu - c_prime) / (mu + c_prime) * b / g)
    return principal if mu + c_prime > 0 else principal - math.pi


# --------------------------------------------------------------------------
# certification

@dataclass
class Certificate:
    cost: float
    witness: Optional[PrimalPoint]
    source: str
    rejected: list = field(default_factory=list)  # (source, cost, violation)
    flagged_traces: list = field(default_factory=list)  # indices ending above the best


def feasibility_violation(net: Network, p: PrimalPoint) -> float:
    dp, dq = balance_residuals(net, p)
    worst = max(float(np.max(np.abs(dp))), float(np.max(np.abs(dq))))
    for k, bus in enumerate(net.buses):
        worst = max(worst, bus.v_min - p.v[k], p.v[k] - bus.v_max)
    for k, gen in enumerate(net.gens):
        worst = max(worst, gen.p_min - p.pg[k], p.pg[k] - gen.p_max,
                    gen.q_min - p.qg[k], p.qg[k] - gen.q_max)
    return max(worst, 0.0)


def certify_best(net: Network, enumeration: Optional[Enumeration] = None,
                 escapes: Sequence = (), tol: float = 1e-4) -> Certificate:
    """Lowest cost among enumerated clusters and escape traces, with a feasible witness.

    Candidates whose primal violates the ACOPF constraints by more than
    ``tol`` are rejected.  Traces whose best cost ends above the certified
    cost (relative 1e-6) are flagged by index.
    """
    candidates = []
    if enumeration is not None:
        for k, c in enumerate(enumeration.clusters):
            candidates.append((c.cost, c.primal, f"cluster[{k}]"))
    for k, trace in enumerate(escapes):
        if trace.best is not None:
            candidates.append((trace.best.cost, trace.best.primal, f"trace[{k}]"))
    if not candidates:
        raise ValueError("nothing to certify")
    cert = Certificate(math.inf, None, "")
    for cost, primal, source in sorted(candidates, key=lambda t: t[0]):
        viol = feasibility_violation(net, primal)
        if viol > tol:
            cert.rejected.append((source, cost, viol))
            continue
        cert.cost, cert.witness, cert.source = cost, primal, source
        break
    if cert.witness is not None:
        for k, trace in enumerate(escapes):
            if trace.best is None or trace.best.cost > cert.cost + 1e-6 * abs(cert.cost):
                cert.flagged_traces.append(k)
    return cert
