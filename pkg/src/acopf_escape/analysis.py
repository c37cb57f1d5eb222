"""Numeric checks of the landscape geometry behind the escape method.

Covers Hessian classification, the 2-bus closed forms (Lagrangian curvature,
leading principal minors, voltage gradients at feasible points, line loss),
attraction-basin sampling, and landscape grids for contour plotting.
:func:`run_theory_checks` bundles the claims into named pass/fail checks.

Conventions for the 2-bus problems: ``theta`` is the angle lag of the load
bus, the slack bus generator has unit marginal cost, and the variable order
of the free-voltage problem is ``(theta, V1, V2)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .casefile import Network
from .model import NlpProblem, assemble_reduced, lagrangian_of, penalized_of

__all__ = [
    "Axis", "BasinReport", "CheckResult", "HessianReport", "LandscapeGrid", "ReducedLandscape",
    "VoltageTwoBus", "basin_check", "binding_voltage_gradients", "fd_gradient", "fd_hessian",
    "hessian_classify", "lagrangian_curvature_2bus", "landscape_grid", "leading_minors",
    "mesh_pattern", "minors_2bus_v1_binding", "minors_2bus_v2_binding", "random_voltage_instances",
    "reduced_duals", "reduced_solutions", "run_theory_checks", "transmission_loss",
    "voltage_kkt_points", "voltage_kkt_rows", "CHECKS",
]

POS_DEF = "PosDef"
NEG_DEF = "NegDef"
INDEFINITE = "Indefinite"
POS_SEMI = "PosSemiDef"
NEG_SEMI = "NegSemiDef"


# --------------------------------------------------------------------------
# finite differences

def fd_gradient(f: Callable, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for k in range(len(x)):
        h = step * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def _fd_hessian_once(f, x, hs):
    n = len(x)
    H = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = hs[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / hs[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = hs[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * hs[i] * hs[j])
    return H


def fd_hessian(f: Callable, x, step: float = 1e-3, gradient: Optional[Callable] = None) -> np.ndarray:
    """Central-difference Hessian.

    From function values, two step sizes are combined by Richardson
    extrapolation (error of order step**4).  With ``gradient``, the gradient
    is differenced instead and the result symmetrized.
    """
    x = np.asarray(x, dtype=float)
    if gradient is not None:
        n = len(x)
        H = np.zeros((n, n))
        for k in range(n):
            h = 1e-6 * max(1.0, abs(x[k]))
            e = np.zeros(n)
            e[k] = h
            H[:, k] = (gradient(x + e) - gradient(x - e)) / (2 * h)
        return 0.5 * (H + H.T)
    hs = step * np.maximum(1.0, np.abs(x))
    coarse = _fd_hessian_once(f, x, hs)
    fine = _fd_hessian_once(f, x, hs / 2)
    return (4 * fine - coarse) / 3


# --------------------------------------------------------------------------
# Hessian classification

@dataclass
class HessianReport:
    point: Optional[np.ndarray]
    eigenvalues: np.ndarray
    hessian_class: str
    minors: list

    def to_dict(self) -> dict:
        return {"point": None if self.point is None else np.asarray(self.point).tolist(),
                "eigenvalues": self.eigenvalues.tolist(), "class": self.hessian_class,
                "minors": list(self.minors)}


def leading_minors(H) -> list:
    H = np.asarray(H, dtype=float)
    return [float(np.linalg.det(H[:k, :k])) for k in range(1, H.shape[0] + 1)]


def hessian_classify(H, tol: float = 1e-8, point=None) -> HessianReport:
    """Definiteness from eigenvalue signs.

    Eigenvalues within ``tol * max(1, ||H||_2)`` of zero count as zero, so a
    matrix with zero and positive eigenvalues is ``PosSemiDef``.  The zero
    matrix is reported as ``PosSemiDef``.  Leading principal minors are
    attached for matrices up to 3x3.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] != H.shape[1]:
        raise ValueError("Hessian must be square")
    scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
    if np.max(np.abs(H - H.T), initial=0.0) > tol * scale:
        raise ValueError("Hessian is not symmetric within tolerance")
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    thr = tol * max(1.0, float(np.max(np.abs(eig), initial=0.0)))
    pos = int(np.sum(eig > thr))
    neg = int(np.sum(eig < -thr))
    n = len(eig)
    if pos == n:
        cls = POS_DEF
    elif neg == n:
        cls = NEG_DEF
    elif pos and neg:
        cls = INDEFINITE
    elif neg:
        cls = NEG_SEMI
    else:
        cls = POS_SEMI
    minors = leading_minors(H) if n <= 3 else []
    return HessianReport(None if point is None else np.asarray(point, float), eig, cls, minors)


# --------------------------------------------------------------------------
# 2-bus closed forms

def _ridge_denominator(g, b, theta):
    # g cos(theta) (tan(theta) - b/g), written without the tangent
    den = g * math.sin(theta) - b * math.cos(theta)
    if abs(den) < 1e-14 * max(abs(g), abs(b), 1.0):
        raise ValueError("theta lies on the ridge atan(b/g) between the two basins")
    return den


def lagrangian_curvature_2bus(g: float, b: float, theta: float) -> float:
    """Second derivative of the partial Lagrangian in ``theta`` with the multiplier that makes ``theta`` stationary."""
    return -2 * g * b / _ridge_denominator(g, b, theta)


def minors_2bus_v2_binding(v1, v2, theta, mu, g, b) -> tuple[float, float]:
    """Leading minors of the Lagrangian Hessian over ``(theta, V1)`` when V2 sits at a bound.

    Valid wherever ``mu`` makes ``theta`` stationary; ``mu`` itself cancels.
    """
    d1 = v1 * v2 * (-2 * g * b) / _ridge_denominator(g, b, theta)
    return d1, 2 * g * d1


def minors_2bus_v1_binding(v1, v2, theta, mu, g, b) -> tuple[float, float]:
    """Leading minors over ``(theta, V2)`` when V1 sits at a bound."""
    d1 = v1 * v2 * (-2 * g * b) / _ridge_denominator(g, b, theta)
    return d1, 2 * g * mu * d1


def binding_voltage_gradients(v1, v2, theta, g, b) -> tuple[float, float]:
    """Gradient of the sending-end power in ``(V1, V2)``.

    At feasible points the penalty term and its gradient vanish, so this is
    also the voltage gradient of the penalized objective there.
    """
    a = g * math.cos(theta) - b * math.sin(theta)
    return 2 * g * v1 - v2 * a, -v1 * a


def transmission_loss(g, theta):
    return 2 * g * (1 - np.cos(theta))


# --------------------------------------------------------------------------
# free-voltage 2-bus problem (active power only)

@dataclass(frozen=True)
class VoltageTwoBus:
    """``min P_12  s.t.  l + P_21 = 0,  v_min <= V1, V2 <= v_max``."""

    g: float
    b: float
    load: float
    v_min: float = 0.95
    v_max: float = 1.05

    def objective(self, x) -> float:
        t, v1, v2 = x
        return self.g * v1 * v1 - v1 * v2 * (self.g * math.cos(t) - self.b * math.sin(t))

    def balance(self, x) -> float:
        t, v1, v2 = x
        return self.load + self.g * v2 * v2 - v1 * v2 * (self.g * math.cos(t) + self.b * math.sin(t))

    def _parts(self, x):
        t, v1, v2 = x
        c, s = math.cos(t), math.sin(t)
        a = self.g * c - self.b * s  # in the objective
        e = self.g * c + self.b * s  # in the balance
        da = -self.g * s - self.b * c
        de = -self.g * s + self.b * c
        return t, v1, v2, a, e, da, de

    def gradients(self, x):
        t, v1, v2, a, e, da, de = self._parts(x)
        gf = np.array([-v1 * v2 * da, 2 * self.g * v1 - v2 * a, -v1 * a])
        gh = np.array([-v1 * v2 * de, -v2 * e, 2 * self.g * v2 - v1 * e])
        return gf, gh

    def hessians(self, x):
        t, v1, v2, a, e, da, de = self._parts(x)
        # d2(a)/dt2 = -a, d2(e)/dt2 = -e
        Hf = np.array([[v1 * v2 * a, -v2 * da, -v1 * da],
                       [-v2 * da, 2 * self.g, -a],
                       [-v1 * da, -a, 0.0]])
        Hh = np.array([[v1 * v2 * e, -v2 * de, -v1 * de],
                       [-v2 * de, 0.0, -e],
                       [-v1 * de, -e, 2 * self.g]])
        return Hf, Hh

    def lagrangian(self, x, mu) -> float:
        return self.objective(x) + mu * self.balance(x)

    def lagrangian_hessian(self, x, mu) -> np.ndarray:
        Hf, Hh = self.hessians(x)
        return Hf + mu * Hh

    def multiplier(self, x) -> float:
        """Multiplier from stationarity in ``theta`` (the angle is never bounded)."""
        gf, gh = self.gradients(x)
        return -gf[0] / gh[0]

    def problem(self) -> NlpProblem:
        def hess(x, y_eq=None, y_ineq=None, obj_factor=1.0):
            Hf, Hh = self.hessians(x)
            y = 0.0 if y_eq is None else float(y_eq[0])
            return obj_factor * Hf + y * Hh

        return NlpProblem(
            lb=np.array([-np.inf, self.v_min, self.v_min]),
            ub=np.array([np.inf, self.v_max, self.v_max]),
            objective=self.objective, gradient=lambda x: self.gradients(x)[0], hessian=hess,
            n_eq=1, eq=lambda x: np.array([self.balance(x)]),
            eq_jac=lambda x: self.gradients(x)[1][None, :],
            labels=("theta", "V1", "V2"), meta={"kind": "voltage-2bus"})


def random_voltage_instances(n: int, seed: int) -> list:
    """Feasible instances: the load is a random fraction of what the line carries at ``v_min``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        g = rng.uniform(0.2, 2.0)
        b = rng.uniform(0.5, 8.0)
        v_min = rng.uniform(0.90, 0.97)
        v_max = rng.uniform(1.03, 1.10)
        cap = v_min ** 2 * (math.hypot(g, b) - g)
        out.append(VoltageTwoBus(g, b, rng.uniform(0.05, 0.9) * cap, v_min, v_max))
    return out


@dataclass
class VoltageKktPoint:
    x: np.ndarray
    cost: float
    mu: float
    at_bound: tuple  # (V1 at a bound, V2 at a bound)
    kkt_residual: float


def voltage_kkt_points(inst: VoltageTwoBus, n_starts: int = 8, seed: int = 0,
                       tol: float = 1e-9, bound_tol: float = 1e-6) -> list:
    """Distinct KKT points of the free-voltage problem found from spread-out starts.

    Angles are reported in ``[-pi/2, 3pi/2)``.  Sorted by cost.
    """
    from .nlp import SolveOptions, minimize

    rng = np.random.default_rng(seed)
    prob = inst.problem()
    opts = SolveOptions(tol=tol, max_iter=300)
    found: list = []
    starts = np.linspace(-math.pi / 2, 3 * math.pi / 2, n_starts, endpoint=False) + 0.1
    for t0 in starts:
        x0 = np.array([t0, *rng.uniform(inst.v_min, inst.v_max, 2)])
        out = minimize(prob, x0, opts)
        if not out.ok:
            continue
        x = out.primal.copy()
        x[0] = (x[0] + math.pi / 2) % (2 * math.pi) - math.pi / 2
        if any(np.max(np.abs(x - p.x)) <= 1e-5 for p in found):
            continue
        bounds = tuple(bool(min(x[k] - inst.v_min, inst.v_max - x[k]) <= bound_tol)
                       for k in (1, 2))
        found.append(VoltageKktPoint(x, inst.objective(x), float(out.eq_duals[0]), bounds,
                                     out.kkt_residual))
    found.sort(key=lambda p: p.cost)
    return found


# --------------------------------------------------------------------------
# fixed-voltage reductions on a grid

class ReducedLandscape:
    """Fixed-voltage reduction of a network as a function of the angle lags.

    ``kind`` is ``"cost"``, ``"penalized"`` (needs ``rho``) or
    ``"lagrangian"`` (needs ``mu``, one multiplier per load bus).  Calling
    the object evaluates a batch of points ``X`` of shape ``(n, n_lags)``;
    derivatives come from the analytic reduced problem.
    """

    def __init__(self, net: Network, kind: str = "cost", rho: Optional[float] = None,
                 mu=None, v=None):
        base = assemble_reduced(net, v)
        self.base = base
        self.kind = kind
        if kind == "cost":
            self.problem = base
        elif kind == "penalized":
            if rho is None:
                raise ValueError("penalized landscape needs rho")
            self.problem = penalized_of(base, rho)
        elif kind == "lagrangian":
            if mu is None:
                raise ValueError("lagrangian landscape needs mu")
            mu = np.asarray(mu, dtype=float)
            if mu.shape != (base.n_eq,):
                raise ValueError(f"mu must have {base.n_eq} entries")
            self.problem = lagrangian_of(base, mu)
        else:
            raise ValueError(f"unknown landscape kind {kind!r}")
        self.rho, self.mu = rho, mu
        meta = base.meta
        self.free, self.gbus, self.lbus, self.v = (meta["free_buses"], meta["gen_buses"],
                                                   meta["load_buses"], meta["v"])
        br = net.branches
        f = np.array([x.f for x in br], dtype=int)
        t = np.array([x.t for x in br], dtype=int)
        self.i = np.concatenate([f, t])
        self.j = np.concatenate([t, f])
        self.g = np.concatenate([[x.g for x in br]] * 2)
        self.b = np.concatenate([[x.b for x in br]] * 2)
        self.incidence = np.zeros((len(self.i), net.n_bus))
        self.incidence[np.arange(len(self.i)), self.i] = 1.0
        self.pd = np.array([x.pd for x in net.buses])
        gen_at = {}
        for gen in net.gens:
            if gen.p_max > gen.p_min:
                gen_at[gen.bus] = gen
        self.gens = [gen_at[k] for k in self.gbus]
        self.n_bus = net.n_bus

    @property
    def dim(self) -> int:
        return len(self.free)

    def parts(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.zeros((X.shape[0], self.n_bus))
        theta[:, self.free] = -X
        d = theta[:, self.i] - theta[:, self.j]
        vi, vj = self.v[self.i], self.v[self.j]
        P = vi * vi * self.g - vi * vj * (self.g * np.cos(d) - self.b * np.sin(d))
        inj = self.pd + P @ self.incidence
        cost = sum(gen.cost_at(inj[:, k]) for gen, k in zip(self.gens, self.gbus))
        return np.asarray(cost, dtype=float), inj[:, self.lbus]

    def __call__(self, X) -> np.ndarray:
        cost, h = self.parts(X)
        if self.kind == "penalized":
            return cost + 0.5 * self.rho * np.sum(h * h, axis=1)
        if self.kind == "lagrangian":
            return cost + h @ self.mu
        return cost

    def value(self, x) -> float:
        return float(self.problem.objective(np.asarray(x, dtype=float)))

    def gradient(self, x) -> np.ndarray:
        return self.problem.gradient(np.asarray(x, dtype=float))

    def hessian(self, x) -> np.ndarray:
        return self.problem.hessian(np.asarray(x, dtype=float))


def reduced_duals(problem: NlpProblem, x) -> np.ndarray:
    """Balance multipliers from stationarity of ``f + mu . h`` (least squares)."""
    J = problem.eval_eq_jac(x)
    return -np.linalg.lstsq(J.T, problem.gradient(x), rcond=None)[0]


def solve_reduced_balance(problem: NlpProblem, x0) -> np.ndarray:
    """Feasible point of the fixed-voltage balance nearest (by Newton) to ``x0``."""
    sol = optimize.root(problem.eval_eq, np.asarray(x0, float), jac=problem.eval_eq_jac,
                        method="hybr", options={"xtol": 1e-14})
    # success flags are unreliable near machine precision; judge by the residual
    if np.max(np.abs(problem.eval_eq(sol.x))) > 1e-10:
        raise RuntimeError(f"balance solve from {x0} failed: {sol.message}")
    return sol.x


def reduced_solutions(net: Network, step: float = 0.02, rho: float = 1e3) -> list:
    """Feasible points of the fixed-voltage balance, sorted by cost.

    Minima of a stiff penalized objective over one period of every lag seed
    an exact balance solve; returns ``(lags, cost, multipliers)`` tuples.
    """
    from .oracle import grid_search

    pen = ReducedLandscape(net, "penalized", rho=rho)
    if pen.base.n_eq != pen.dim:
        raise ValueError("reduction must have one balance equation per lag")
    box = [(-math.pi, math.pi)] * pen.dim
    found: list = []
    for p in grid_search(pen, box, step, gradient=pen.gradient, hessian=pen.hessian,
                         vectorized=True, periodic=True):
        x = solve_reduced_balance(pen.base, p.primal)
        x = (x + math.pi) % (2 * math.pi) - math.pi
        if any(np.max(np.abs(x - q[0])) <= 1e-6 for q in found):
            continue
        found.append((x, float(pen.base.objective(x)), reduced_duals(pen.base, x)))
    found.sort(key=lambda t: t[1])
    return found


# --------------------------------------------------------------------------
# basin sampling

@dataclass
class BasinReport:
    passed: bool
    max_inner: float  # largest grad(x).(x_star - x) over the samples; must be < 0
    counterexamples: list
    n_samples: int

    def to_dict(self) -> dict:
        return {"passed": self.passed, "max_inner": self.max_inner,
                "n_counterexamples": len(self.counterexamples), "n_samples": self.n_samples,
                "counterexamples": [np.asarray(c).tolist() for c in self.counterexamples[:20]]}


def basin_check(gradient: Callable, x_star, box: Sequence[tuple[float, float]], n_samples: int,
                seed: int, exclude: float = 1e-6) -> BasinReport:
    """Sample the box and test ``grad(x) . (x_star - x) < 0`` at every sample.

    Points within ``exclude`` (infinity norm) of ``x_star`` are skipped.
    Passing requires strict negativity everywhere; the worst value is
    reported so callers can apply their own margin.
    """
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    rng = np.random.default_rng(seed)
    lo = np.array([a for a, _ in box], dtype=float)
    hi = np.array([c for _, c in box], dtype=float)
    worst = -math.inf
    bad = []
    used = 0
    for _ in range(n_samples):
        x = rng.uniform(lo, hi)
        if np.max(np.abs(x - x_star)) <= exclude:
            continue
        used += 1
        inner = float(np.dot(np.atleast_1d(gradient(x)), x_star - x))
        worst = max(worst, inner)
        if not inner < 0:
            bad.append(x)
    return BasinReport(not bad, worst, bad, used)


# --------------------------------------------------------------------------
# landscape grids

@dataclass(frozen=True)
class Axis:
    label: str
    lo: float
    hi: float
    step: float
    index: int = 0  # position in the objective's argument vector

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"axis {self.label!r} has zero or negative width")
        if not self.step > 0:
            raise ValueError(f"axis {self.label!r} needs a positive step")


@dataclass
class LandscapeGrid:
    axes: list
    values: np.ndarray
    markers: list  # StationaryPoint, coordinates in axis order
    fixed: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def coordinates(self) -> list:
        from .oracle import grid_axes

        return grid_axes([(a.lo, a.hi) for a in self.axes], min(a.step for a in self.axes))

    def minima(self) -> list:
        return [m for m in self.markers if m.hessian_class == POS_DEF]

    def write_csv(self, path, header: Optional[dict] = None) -> None:
        """Axis description rows (``# axis,...``) followed by one row per sample."""
        coords = self.coordinates()
        with open(path, "w", newline="") as fh:
            for key, val in sorted((header or {}).items()):
                fh.write(f"# {key},{val}\n")
            for a, c in zip(self.axes, coords):
                fh.write(f"# axis,{a.label},{a.lo!r},{a.hi!r},{a.step!r},{len(c)}\n")
            w = csv.writer(fh)
            w.writerow([a.label for a in self.axes] + ["value"])
            mesh = np.meshgrid(*coords, indexing="ij")
            for idx in np.ndindex(self.values.shape):
                w.writerow([repr(float(m[idx])) for m in mesh] + [repr(float(self.values[idx]))])

    def write_markers_json(self, path, extra: Optional[dict] = None) -> None:
        doc = {"axes": [{"label": a.label, "lo": a.lo, "hi": a.hi, "step": a.step}
                        for a in self.axes],
               "markers": [m.to_dict() for m in self.markers], **self.meta}
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def landscape_grid(objective: Callable, axes: Sequence[Axis], fixed=None, *,
                   vectorized: bool = False, gradient: Optional[Callable] = None,
                   hessian: Optional[Callable] = None, meta: Optional[dict] = None) -> LandscapeGrid:
    """Sample ``objective`` over one or two axes and mark its interior local minima.

    ``fixed`` is the full argument vector; the axes overwrite the entries at
    their ``index``.  Without ``fixed`` the objective takes the axis
    coordinates directly.
    """
    from .oracle import grid_axes, grid_search, sample_grid

    axes = list(axes)
    if not 1 <= len(axes) <= 2:
        raise ValueError("landscape grids have one or two free axes")
    step = axes[0].step
    if any(a.step != step for a in axes):
        raise ValueError("all axes must share one step")
    base = None if fixed is None else np.asarray(fixed, dtype=float)
    idx = [a.index for a in axes]

    def embed(Y):
        Y = np.atleast_2d(Y)
        if base is None:
            return Y
        X = np.repeat(base[None, :], Y.shape[0], axis=0)
        X[:, idx] = Y
        return X

    if vectorized:
        def f(Y):
            return np.asarray(objective(embed(Y)), dtype=float)
    else:
        def f(y):
            return float(objective(embed(y)[0]))

    def restrict(fn, hess=False):
        if fn is None:
            return None
        if base is None:
            return fn
        if hess:
            return lambda y: np.asarray(fn(embed(y)[0]))[np.ix_(idx, idx)]
        return lambda y: np.asarray(fn(embed(y)[0]))[idx]

    box = [(a.lo, a.hi) for a in axes]
    coords = grid_axes(box, step)
    values = sample_grid(f, coords, vectorized)
    markers = grid_search(f, box, step, gradient=restrict(gradient), hessian=restrict(hessian, True),
                          vectorized=vectorized, values=values)
    return LandscapeGrid(axes, values, markers, base, dict(meta or {}))


# --------------------------------------------------------------------------
# 3-bus mesh pattern

MESH_PATTERN_LOADS = (2.0, 2.0)
MESH_PATTERN_RHO = 10.0


def mesh_pattern(net: Optional[Network] = None, rho: float = MESH_PATTERN_RHO,
                   step: float = 0.01) -> dict:
    """Stationary structure of the fixed-voltage 3-bus mesh.

    Grid-searches the penalized objective over one period of both lags,
    solves the balance exactly near each minimizer to get that solution's
    multipliers, and classifies the partial-Lagrangian Hessian at every
    grid minimizer for every set of multipliers.
    """
    from .cases import threebus_mesh
    from .oracle import grid_search

    net = net or threebus_mesh(loads=MESH_PATTERN_LOADS)
    pen = ReducedLandscape(net, "penalized", rho=rho)
    box = [(-math.pi, math.pi)] * pen.dim
    points = grid_search(pen, box, step, gradient=pen.gradient, hessian=pen.hessian,
                         vectorized=True, periodic=True)
    base = pen.base
    exact, duals = [], []
    for p in points:
        x = solve_reduced_balance(base, p.primal)
        exact.append(x)
        duals.append(reduced_duals(base, x))
    cross = []  # cross[k][m]: class at point m with the multipliers of solution k
    for mu in duals:
        lag = lagrangian_of(base, mu)
        cross.append([hessian_classify(lag.hessian(p.primal)).hessian_class for p in points])
    return {
        "points": points,
        "penalized_classes": [p.hessian_class for p in points],
        "exact_solutions": exact,
        "exact_costs": [float(base.objective(x)) for x in exact],
        "duals": duals,
        "own_dual_classes": [cross[k][k] for k in range(len(points))],
        "cross_classes": cross,
        "rho": rho,
    }


# --------------------------------------------------------------------------
# named theory checks

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        parts = []
        for key, val in self.detail.items():
            if isinstance(val, (bool, int, np.integer)):
                parts.append(f"{key}={val}")
            elif isinstance(val, (float, np.floating)):
                parts.append(f"{key}={val:.4g}")
        head = f"{'PASS' if self.passed else 'FAIL'}  {self.name}"
        return head + ("  " + " ".join(parts) if parts else "")


def random_line_triples(n: int, seed: int) -> list:
    """Feasible ``(g, b, l)`` with ``l`` up to 95% of the line's transfer limit."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        g = rng.uniform(0.1, 3.0)
        b = rng.uniform(0.2, 10.0)
        out.append((g, b, rng.uniform(0.0, 0.95) * (math.hypot(g, b) - g)))
    return out


def _formula(formulas, name):
    return (formulas or {}).get(name, globals().get(name))


def check_root_ordering(n=1000, seed=0, formulas=None) -> CheckResult:
    from .oracle import two_bus_roots

    bad = []
    for g, b, l in random_line_triples(n, seed):
        star, bar = two_bus_roots(g, b, l)
        if not -math.pi / 2 < star < math.atan(b / g) < bar < 3 * math.pi / 2:
            bad.append((g, b, l, star, bar))
    return CheckResult("root_ordering", not bad, {"n": n, "violations": bad[:10]})


def check_minimizer_containment(n=1000, seed=0, formulas=None) -> CheckResult:
    """The partial-Lagrangian minimizer built from either root's multiplier lies in the global basin.

    The global root's basin is ``(atan(b/g) - pi, atan(b/g))`` (one period
    between the two maxima of ``h``); when the local root exceeds pi/2 the
    minimizer also lies in ``(-pi/2, atan(b/g))``.
    """
    from .oracle import lagrangian_minimizer_2bus, mu_of_theta_2bus, two_bus_roots

    minimizer = _formula(formulas, "lagrangian_minimizer_2bus") or lagrangian_minimizer_2bus
    bad, narrow_bad, narrow_n = [], [], 0
    for g, b, l in random_line_triples(n, seed):
        ridge = math.atan(b / g)
        star, bar = two_bus_roots(g, b, l)
        for root in (star, bar):
            if abs(root - ridge) < 1e-9:
                continue
            th = minimizer(g, b, 1.0, mu_of_theta_2bus(g, b, root))
            if not ridge - math.pi < th < ridge:
                bad.append((g, b, l, root, th))
            if bar > math.pi / 2:
                narrow_n += 1
                if not -math.pi / 2 < th < ridge:
                    narrow_bad.append((g, b, l, root, th))
    return CheckResult("minimizer_containment", not bad and not narrow_bad,
                       {"n": n, "violations": bad[:10], "narrow_checked": narrow_n,
                        "narrow_violations": narrow_bad[:10]})


def check_loss_dominance(n=1000, seed=0, formulas=None) -> CheckResult:
    from .oracle import two_bus_roots

    loss = _formula(formulas, "transmission_loss")
    bad = []
    for g, b, l in random_line_triples(n, seed):
        star, bar = two_bus_roots(g, b, l)
        if bar - star < 1e-9:
            continue
        if not loss(g, star) < loss(g, bar):
            bad.append((g, b, l))
    return CheckResult("loss_dominance", not bad, {"n": n, "violations": bad[:10]})


def check_curvature_signs(n=200, seed=0, formulas=None) -> CheckResult:
    """Closed-form curvature is positive at the global root, negative at the local root, and matches finite differences."""
    from .oracle import mu_of_theta_2bus, two_bus_roots

    curv = _formula(formulas, "lagrangian_curvature_2bus")
    bad, worst = [], 0.0
    for g, b, l in random_line_triples(n, seed):
        star, bar = two_bus_roots(g, b, l)
        if bar - star < 1e-6:
            continue
        for root, sign in ((star, 1), (bar, -1)):
            mu = mu_of_theta_2bus(g, b, root)

            def lag(t):
                return (g - g * math.cos(t) + b * math.sin(t)) + mu * (l + g - g * math.cos(t) - b * math.sin(t))

            closed = curv(g, b, root)
            fd = fd_hessian(lambda x: lag(x[0]), np.array([root]))[0, 0]
            rel = abs(closed - fd) / max(1.0, abs(closed))
            worst = max(worst, rel)
            if sign * closed <= 0 or rel > 1e-6:
                bad.append((g, b, l, root, closed, fd))
    return CheckResult("curvature_signs", not bad, {"n": n, "max_rel_fd_error": worst,
                                                    "violations": bad[:10]})


def voltage_kkt_rows(instances, seed) -> list:
    """``(instance index, instance, KKT point, is best)`` for every point of every instance."""
    rows = []
    for k, inst in enumerate(instances):
        pts = voltage_kkt_points(inst, seed=seed + k)
        for rank, p in enumerate(pts):
            rows.append((k, inst, p, rank == 0))
    return rows


def check_minors(n=100, seed=0, formulas=None, rows=None) -> CheckResult:
    """Closed-form minors match finite differences; definiteness separates the best point from the rest."""
    v2m = _formula(formulas, "minors_2bus_v2_binding")
    v1m = _formula(formulas, "minors_2bus_v1_binding")
    rows = rows if rows is not None else voltage_kkt_rows(random_voltage_instances(n, seed), seed)
    bad, worst, compared = [], 0.0, 0
    for k, inst, p, best in rows:
        t, v1, v2 = p.x
        H_fd = fd_hessian(lambda x: inst.lagrangian(x, p.mu), p.x)
        v1b, v2b = p.at_bound
        if v2b and not v1b:
            free, closed = [0, 1], v2m(v1, v2, t, p.mu, inst.g, inst.b)
        elif v1b and not v2b:
            free, closed = [0, 2], v1m(v1, v2, t, p.mu, inst.g, inst.b)
        elif v1b and v2b:
            free, closed = [0], v2m(v1, v2, t, p.mu, inst.g, inst.b)[:1]
        else:
            free, closed = [0, 1, 2], None
        H_free = H_fd[np.ix_(free, free)]
        if closed is not None and abs(inst.g * math.sin(t) - inst.b * math.cos(t)) > 1e-6:
            fd_minors = leading_minors(H_free)
            for c, d in zip(closed, fd_minors):
                rel = abs(c - d) / max(abs(c), 1e-12)
                worst = max(worst, rel)
                compared += 1
                if rel > 1e-6:
                    bad.append(("minor", k, p.x.tolist(), c, d))
        cls = hessian_classify(inst.lagrangian_hessian(p.x, p.mu)[np.ix_(free, free)]).hessian_class
        if best != (cls == POS_DEF):
            bad.append(("definiteness", k, p.x.tolist(), best, cls))
    return CheckResult("minors", not bad, {"instances": n, "points": len(rows),
                                           "minors_compared": compared,
                                           "max_rel_error": worst, "violations": bad[:10]})


def check_binding_exclusivity(n=100, seed=0, formulas=None, rows=None) -> CheckResult:
    """Exactly one of V1, V2 at a bound at every enumerated KKT point."""
    rows = rows if rows is not None else voltage_kkt_rows(random_voltage_instances(n, seed), seed)
    both, neither = [], []
    for k, inst, p, best in rows:
        if all(p.at_bound):
            both.append((k, p.x.tolist(), best))
        elif not any(p.at_bound):
            neither.append((k, p.x.tolist(), best))
    return CheckResult("binding_exclusivity", not both and not neither,
                       {"points": len(rows), "both_binding": len(both),
                        "both_binding_at_best": sum(1 for r in both if r[2]),
                        "none_binding": len(neither), "examples": (both + neither)[:10]})


def check_mesh_pattern(formulas=None, step: float = 0.01) -> CheckResult:
    res = mesh_pattern(step=step)
    pts = res["points"]
    own = res["own_dual_classes"]
    ok = (len(pts) == 4 and all(c == POS_DEF for c in res["penalized_classes"])
          and own[0] == POS_DEF and all(c in (NEG_DEF, INDEFINITE) for c in own[1:]))
    # multipliers of each strict local solution, classes at all four points
    strict = {}
    for k in range(1, len(pts)):
        row = res["cross_classes"][k]
        strict[k] = row
    ok_cross = [k for k, row in strict.items()
                if row[0] == POS_DEF and all(c in (NEG_DEF, INDEFINITE) for c in row[1:])]
    return CheckResult("mesh_pattern", ok and bool(ok_cross), {
        "angles": [np.round(p.primal, 4).tolist() for p in pts],
        "penalized_classes": res["penalized_classes"], "own_dual_classes": own,
        "cross_classes": res["cross_classes"], "duals_satisfying_pattern": ok_cross,
    })


def check_basin(formulas=None, rho: float = 1e3, n_samples: int = 2000, seed: int = 0) -> CheckResult:
    """Inner-product basin test around the global root, and its failure across the ridge."""
    from .cases import fix_voltages, twobus
    from .oracle import two_bus_roots

    g, b, l = 1.0, 4.0, 1.0
    pen = ReducedLandscape(fix_voltages(twobus(g, b, l)), "penalized", rho=rho)
    star, _ = two_bus_roots(g, b, l)
    x_star = optimize.minimize(lambda x: pen.value(x), [star], jac=pen.gradient,
                               hess=pen.hessian, method="trust-exact",
                               options={"gtol": 1e-13}).x
    ridge = math.atan(b / g)
    eps = 1e-3
    inside = basin_check(pen.gradient, x_star, [(-math.pi / 2 + eps, ridge - eps)], n_samples, seed)
    across = basin_check(pen.gradient, x_star, [(-math.pi / 2 + eps, ridge + 0.5)], n_samples, seed)
    return CheckResult("basin", inside.passed and not across.passed,
                       {"minimizer": float(x_star[0]), "max_inner_product": inside.max_inner,
                        "inside": inside.to_dict(),
                        "straddling": {"passed": across.passed,
                                       "n_counterexamples": len(across.counterexamples)}})


CHECKS = {
    "root_ordering": check_root_ordering,
    "minimizer_containment": check_minimizer_containment,
    "loss_dominance": check_loss_dominance,
    "curvature_signs": check_curvature_signs,
    "minors": check_minors,
    "binding_exclusivity": check_binding_exclusivity,
    "mesh_pattern": check_mesh_pattern,
    "basin": check_basin,
}

DEFAULT_CHECKS = ("root_ordering", "minimizer_containment", "loss_dominance", "curvature_signs",
                  "minors", "binding_exclusivity", "mesh_pattern")


def run_theory_checks(names: Optional[Sequence[str]] = None, seed: int = 0,
                      formulas: Optional[dict] = None) -> list:
    """Run the named checks (default: all but ``basin``).

    ``formulas`` replaces closed forms by name, which lets a harness confirm
    that a corrupted formula is caught.
    """
    names = list(names or DEFAULT_CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks: {', '.join(unknown)}")
    rows = None
    out = []
    for name in names:
        if name in ("minors", "binding_exclusivity"):
            if rows is None:
                rows = voltage_kkt_rows(random_voltage_instances(100, seed), seed)
            out.append(CHECKS[name](seed=seed, formulas=formulas, rows=rows))
        elif name in ("mesh_pattern", "basin"):
            out.append(CHECKS[name](formulas=formulas))
        else:
            out.append(CHECKS[name](seed=seed, formulas=formulas))
    return out
